"""Experiment orchestration: configs, runs, metrics files, and comparisons.

A run is deterministic given (config, seed): metrics.csv and steps.csv are
byte-identical across repeats. Wallclock numbers are therefore kept out of
those files by default (the wallclock_us column holds 0 unless timing is
switched on) and live in the run.json sidecar instead.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import alloc, models, oracle, zo
from .errors import StepAborted, StructuralError
from .masking import MaskPolicy, Masker

OPTIMIZERS = ("mezo", "smezo", "rmezo", "fo")
ENGINES = ("inplace", "fused", "twocopy")
TASKS = ("quadratic", "linear", "logistic", "mlp", "transformer", "shifted")

STEPS_HEADER = "step,seed,loss_plus,loss_minus,proj_grad,d_hat,lr,wallclock_us"
METRICS_HEADER = "step,train_loss,eval_loss,eval_acc,grad_norm_sq"

WORKERS_ENV = "SPARSEZO_WORKERS"


@dataclass
class ExperimentConfig:
    task: str = "quadratic"
    optimizer: str = "mezo"
    engine: str = "inplace"
    sparsity: float = 0.75
    mask_side: str = "small"
    sparsify_interval: int = 0  # recalibrate thresholds every k steps; 0 = never
    epsilon: float = 1e-3
    lr: float | str = 1e-6  # float or "theory"
    steps: int = 20000
    eval_every: int = 100
    batch_size: int = 16
    seed: int = 0
    out: str | None = None
    timing: bool = False
    dtype: str = "f32"
    # task knobs
    dim: int = 16
    cond: float = 1.0
    widths: tuple = ()  # empty = equal-width stack from mlp_width/mlp_layers
    mlp_layers: int = 8
    mlp_width: int = 24
    d_model: int = 32
    n_heads: int = 2
    seq_len: int = 16
    vocab: int = 32
    n_train: int = models.DEFAULT_TRAIN
    shift: float = 0.1
    label_noise: float = 0.05
    task_seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.dtype not in ("f32", "f64"):
            raise ValueError("dtype must be f32 or f64")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def policy(self):
        if self.optimizer == "mezo":
            return MaskPolicy("dense")
        if self.optimizer == "rmezo":
            return MaskPolicy("random", self.sparsity)
        if self.optimizer == "smezo":
            return MaskPolicy("magnitude-dynamic", self.sparsity, side=self.mask_side)
        raise ValueError(f"{self.optimizer} has no mask policy")


@dataclass
class RunMetrics:
    config: ExperimentConfig
    eval_rows: list = field(default_factory=list)  # dicts keyed by header names
    aborted_steps: int = 0
    total_steps: int = 0
    wallclock_s: float = 0.0
    peak_alloc_bytes: int = 0
    failed: bool = False
    out_dir: str | None = None

    def steps_to_target(self, target, metric="eval_loss"):
        """First eval step at or below target, or None if never reached."""
        for row in self.eval_rows:
            value = row.get(metric)
            if value is not None and value <= target:
                return row["step"]
        return None

    @property
    def final(self):
        return self.eval_rows[-1] if self.eval_rows else None


# ---------------------------------------------------------------------------
# config files: flat `key = value` lines, '#' comments


_BOOL_KEYS = {"timing"}
_INT_KEYS = {
    "steps", "eval_every", "batch_size", "seed", "dim", "mlp_layers",
    "mlp_width", "d_model", "n_heads", "seq_len", "vocab", "n_train",
    "task_seed", "sparsify_interval",
}
_FLOAT_KEYS = {"sparsity", "epsilon", "cond", "shift", "label_noise"}


def _coerce(key, raw):
    raw = raw.strip()
    if key in _BOOL_KEYS:
        return raw.lower() in ("1", "true", "yes", "on")
    if key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    if key == "lr":
        return raw if raw == "theory" else float(raw)
    if key == "widths":
        return tuple(int(w) for w in raw.split(",") if w.strip())
    return raw


def parse_config_file(path):
    """Flat key-value config; later lines win."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise StructuralError(f"{path}:{lineno}: expected `key = value`")
            key, raw = line.split("=", 1)
            key = key.strip()
            values[key] = _coerce(key, raw)
    return values


def make_config(file_values=None, cli_values=None):
    """Merge defaults < config file < CLI overrides into a config."""
    merged = {}
    known = {f.name for f in fields(ExperimentConfig)}
    for source in (file_values or {}), (cli_values or {}):
        for key, value in source.items():
            if key not in known:
                raise StructuralError(f"unknown config key {key!r}")
            if value is not None:
                merged[key] = value
    return ExperimentConfig(**merged)


def write_config_echo(cfg, path):
    lines = []
    for f in sorted(fields(cfg), key=lambda f: f.name):
        value = getattr(cfg, f.name)
        if f.name == "widths":
            value = ",".join(str(w) for w in value)
        lines.append(f"{f.name} = {value}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# task construction


def build_task(cfg):
    """Returns (task, starting parameters)."""
    dtype = cfg.np_dtype
    if cfg.task == "quadratic":
        task = models.quadratic_task(cfg.dim, cfg.cond, dtype=dtype,
                                     seed=cfg.task_seed)
        return task, task.template()
    if cfg.task == "linear":
        task = models.linear_task(cfg.n_train, cfg.dim, seed=cfg.task_seed,
                                  label_noise=cfg.label_noise, dtype=dtype)
        return task, task.template()
    if cfg.task == "logistic":
        task = models.logistic_task(cfg.n_train, cfg.dim, seed=cfg.task_seed,
                                    dtype=dtype)
        return task, task.template()
    if cfg.task == "mlp":
        widths = cfg.widths or [cfg.mlp_width] * (cfg.mlp_layers + 1)
        task = models.mlp_task(list(widths), seed=cfg.task_seed, dtype=dtype)
        return task, task.template()
    if cfg.task == "transformer":
        task = models.tiny_transformer_task(
            cfg.d_model, cfg.n_heads, cfg.seq_len, cfg.vocab,
            seed=cfg.task_seed, dtype=dtype,
        )
        return task, task.template()
    if cfg.task == "shifted":
        pair = models.shifted_pair(cfg.dim, cfg.n_train, seed=cfg.task_seed,
                                   shift_magnitude=cfg.shift,
                                   label_noise=cfg.label_noise, dtype=dtype)
        return pair.task_b, pair.pretrained()
    raise ValueError(cfg.task)


def default_target(cfg, task):
    """Steps-to-target defaults: gradient-norm^2 for quadratics, first-order
    achieved loss + 10% for learned tasks with an analytic gradient."""
    if cfg.task == "quadratic":
        return 0.01, "grad_norm_sq"
    if task.has_analytic_grad:
        p0 = task.template()
        lr = 0.9 / task.lipschitz
        trained, losses = oracle.first_order_baseline(task, p0, lr, 2000)
        metrics = task.eval_metrics(trained)
        return 1.1 * metrics["eval_loss"], "eval_loss"
    return None, "eval_loss"


# ---------------------------------------------------------------------------
# running


def _format(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _eval_row(task, p, step_index):
    metrics = task.eval_metrics(p)
    row = {
        "step": step_index,
        "train_loss": task.full_train_loss(p),
        "eval_loss": metrics.get("eval_loss"),
        "eval_acc": metrics.get("eval_acc"),
        "grad_norm_sq": metrics.get("grad_norm_sq"),
    }
    return row


def run_experiment(cfg):
    """Run one configured experiment; returns RunMetrics and writes files.

    Output files (when cfg.out is set): config.echo, metrics.csv, steps.csv
    (ZO optimizers only), run.json. CSV rows are flushed as they are
    produced so a crash leaves a readable prefix.
    """
    started = time.perf_counter()
    task, p = build_task(cfg)
    out_dir = cfg.out
    steps_fh = metrics_fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_config_echo(cfg, os.path.join(out_dir, "config.echo"))
        metrics_fh = open(os.path.join(out_dir, "metrics.csv"), "w",
                          encoding="utf-8")
        metrics_fh.write(METRICS_HEADER + "\n")
        if cfg.optimizer != "fo":
            steps_fh = open(os.path.join(out_dir, "steps.csv"), "w",
                            encoding="utf-8")
            steps_fh.write(STEPS_HEADER + "\n")

    run = RunMetrics(config=cfg, out_dir=out_dir)

    def emit_eval(step_index):
        row = _eval_row(task, p, step_index)
        run.eval_rows.append(row)
        if metrics_fh:
            metrics_fh.write(
                ",".join(
                    _format(row[k])
                    for k in ("step", "train_loss", "eval_loss", "eval_acc",
                              "grad_norm_sq")
                )
                + "\n"
            )
            metrics_fh.flush()

    try:
        with alloc.track() as meter:
            emit_eval(0)
            if cfg.optimizer == "fo":
                _run_first_order(cfg, task, p, run, emit_eval)
            else:
                _run_zo(cfg, task, p, run, emit_eval, steps_fh)
            run.peak_alloc_bytes = meter.peak
    finally:
        if metrics_fh:
            metrics_fh.close()
        if steps_fh:
            steps_fh.close()

    run.wallclock_s = time.perf_counter() - started
    if run.total_steps and run.aborted_steps > 0.05 * run.total_steps:
        run.failed = True
    if out_dir:
        with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "wallclock_s": run.wallclock_s,
                    "aborted_steps": run.aborted_steps,
                    "total_steps": run.total_steps,
                    "peak_alloc_bytes": run.peak_alloc_bytes,
                    "failed": run.failed,
                },
                fh,
                indent=2,
            )
            fh.write("\n")
    return run


def _run_zo(cfg, task, p, run, emit_eval, steps_fh):
    lr_schedule = "theory" if cfg.lr == "theory" else "constant"
    smoothness = task.lipschitz if lr_schedule == "theory" else None
    if lr_schedule == "theory" and smoothness is None:
        raise StructuralError(
            f"task {cfg.task!r} has no smoothness bound; pass a numeric lr"
        )
    zcfg = zo.ZoConfig(
        epsilon=cfg.epsilon,
        lr=cfg.lr if lr_schedule == "constant" else 1.0,
        policy=cfg.policy(),
        base_seed=cfg.seed,
        steps=max(cfg.steps, 1),
        lr_schedule=lr_schedule,
        smoothness=smoothness,
    )
    masker = Masker.for_params(p, zcfg.policy)
    engine = cfg.engine
    for t in range(cfg.steps):
        if (
            cfg.sparsify_interval > 0
            and t > 0
            and t % cfg.sparsify_interval == 0
            and masker.thresholds is not None
        ):
            masker = Masker.for_params(p, zcfg.policy)
        run.total_steps += 1
        batch = task.minibatch(cfg.seed, t, cfg.batch_size)
        loss_fn = task.bound_loss(batch)
        tick = time.perf_counter() if cfg.timing else None
        try:
            if engine == "twocopy":
                record = _twocopy_step(loss_fn, p, zcfg, t, masker)
            else:
                record = zo.step(loss_fn, p, zcfg, t, masker,
                                 fused=(engine == "fused"))
        except StepAborted:
            run.aborted_steps += 1
            continue
        if cfg.timing:
            record.wallclock_us = int((time.perf_counter() - tick) * 1e6)
        if steps_fh:
            steps_fh.write(
                f"{record.t},{record.step_seed},{record.loss_plus!r},"
                f"{record.loss_minus!r},{record.proj_grad!r},{record.d_hat},"
                f"{record.lr!r},{record.wallclock_us}\n"
            )
            steps_fh.flush()
        if (t + 1) % cfg.eval_every == 0:
            emit_eval(t + 1)


def _twocopy_step(loss_fn, p, zcfg, t, masker):
    """Drive the naive two-copy reference as the run's engine."""
    step_seed = zo.schedule_seed(zcfg.base_seed, t)
    if zcfg.lr_schedule == "theory":
        # d_hat for the theory rate comes from a dry mask tally.
        d_hat = 0
        for layer in p.layers:
            mask = masker.layer_mask(layer, step_seed=step_seed,
                                     base_values=layer.values)
            d_hat += layer.size if mask is None else int(mask.sum(dtype=np.int64))
        lr = zo.theory_lr(d_hat, zcfg.smoothness)
    else:
        lr = zcfg.lr
    updated, record = oracle.reference_spsa_step(
        loss_fn, p, zcfg.epsilon, lr, step_seed, masker
    )
    if not (np.isfinite(record.loss_plus) and np.isfinite(record.loss_minus)):
        raise StepAborted("non-finite loss in two-copy step", step_seed=step_seed)
    for mine, theirs in zip(p.layers, updated.layers):
        mine.values[:] = theirs.values
    record.t = t
    return record


def _run_first_order(cfg, task, p, run, emit_eval):
    if not task.has_analytic_grad:
        raise StructuralError(f"task {cfg.task!r} has no analytic gradient")
    lr = cfg.lr if isinstance(cfg.lr, float) else 0.9 / task.lipschitz
    for t in range(cfg.steps):
        run.total_steps += 1
        grad = task.analytic_grad(p)
        pos = 0
        for tensor in p.layers:
            chunk = grad[pos : pos + tensor.size].astype(tensor.values.dtype)
            tensor.flat[:] = tensor.flat - tensor.values.dtype.type(lr) * chunk
            pos += tensor.size
        if (t + 1) % cfg.eval_every == 0:
            emit_eval(t + 1)


# ---------------------------------------------------------------------------
# comparisons and reports


@dataclass
class ComparisonRow:
    label: str
    steps_to_target: int | None
    final_loss: float | None
    speedup: float | None  # vs the slowest run that reached the target
    wallclock_s: float


@dataclass
class Comparison:
    target: float
    metric: str
    rows: list

    def to_text(self):
        lines = [
            f"target: {self.metric} <= {self.target!r}",
            f"{'run':32s} {'steps-to-target':>16s} {'speedup':>8s} "
            f"{'final-loss':>14s}",
        ]
        for row in self.rows:
            steps = "not reached" if row.steps_to_target is None else str(
                row.steps_to_target
            )
            speed = "-" if row.speedup is None else f"{row.speedup:.2f}"
            final = "-" if row.final_loss is None else f"{row.final_loss:.6g}"
            lines.append(f"{row.label:32s} {steps:>16s} {speed:>8s} {final:>14s}")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        lines = ["run,steps_to_target,speedup,final_loss"]
        for row in self.rows:
            steps = "" if row.steps_to_target is None else row.steps_to_target
            speed = "" if row.speedup is None else repr(row.speedup)
            final = "" if row.final_loss is None else repr(row.final_loss)
            lines.append(f"{row.label},{steps},{speed},{final}")
        return "\n".join(lines) + "\n"


def run_label(run):
    cfg = run.config
    bits = [cfg.optimizer]
    if cfg.optimizer in ("smezo", "rmezo"):
        bits.append(f"r{cfg.sparsity:g}")
    bits.append(f"seed{cfg.seed}")
    return "-".join(bits)


def compare_runs(runs, target, metric="eval_loss", labels=None):
    """Steps-to-target, final losses, and speedups across runs.

    Speedup is steps(slowest reached run) / steps(this run); runs that never
    reach the target report "not reached". The result is independent of the
    input order (rows are sorted by steps, wallclock breaking ties).
    """
    if not runs:
        raise ValueError("need at least one run")
    shared = {(r.config.task, r.config.eval_every) for r in runs}
    if len(shared) != 1:
        raise StructuralError("runs must share the task and eval schedule")
    labels = labels or [run_label(r) for r in runs]
    entries = []
    for run, label in zip(runs, labels):
        steps = run.steps_to_target(target, metric)
        final = run.final.get(metric) if run.final else None
        entries.append((label, steps, final, run.wallclock_s))
    reached = [e for e in entries if e[1] is not None]
    slowest = max((e[1] for e in reached), default=None)
    rows = []
    for label, steps, final, wall in entries:
        speed = None
        if steps is not None and slowest is not None and steps > 0:
            speed = slowest / steps
        elif steps == 0 and slowest is not None:
            speed = float("inf") if slowest > 0 else 1.0
        rows.append(ComparisonRow(label, steps, final, speed, wall))
    rows.sort(
        key=lambda r: (
            r.steps_to_target is None,
            r.steps_to_target if r.steps_to_target is not None else 0,
            r.wallclock_s,
            r.label,
        )
    )
    return Comparison(target=target, metric=metric, rows=rows)


def allocation_report(fused_run, naive_run):
    """Peak auxiliary allocation of the fused path vs the naive two-copy path."""
    for run, expected in ((fused_run, "fused"), (naive_run, "twocopy")):
        if run.peak_alloc_bytes <= 0:
            raise StructuralError(
                f"{expected} run has no allocation instrumentation data"
            )
    ratio = fused_run.peak_alloc_bytes / naive_run.peak_alloc_bytes
    return {
        "fused_peak_bytes": fused_run.peak_alloc_bytes,
        "naive_peak_bytes": naive_run.peak_alloc_bytes,
        "ratio": ratio,
    }


# ---------------------------------------------------------------------------
# loading runs back from disk (for the compare/report CLI paths)


def load_run(out_dir):
    cfg_values = parse_config_file(os.path.join(out_dir, "config.echo"))
    cfg_values = {
        k: v for k, v in cfg_values.items()
        if k in {f.name for f in fields(ExperimentConfig)}
    }
    if cfg_values.get("out") in ("None", ""):
        cfg_values["out"] = None
    cfg = make_config(cfg_values)
    cfg = replace(cfg, out=out_dir)
    run = RunMetrics(config=cfg, out_dir=out_dir)
    with open(os.path.join(out_dir, "metrics.csv"), "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            row = {}
            for key, raw in zip(header, parts):
                if raw == "":
                    row[key] = None
                elif key == "step":
                    row[key] = int(raw)
                else:
                    row[key] = float(raw)
            run.eval_rows.append(row)
    sidecar = os.path.join(out_dir, "run.json")
    if os.path.exists(sidecar):
        with open(sidecar, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        run.wallclock_s = meta.get("wallclock_s", 0.0)
        run.aborted_steps = meta.get("aborted_steps", 0)
        run.total_steps = meta.get("total_steps", 0)
        run.peak_alloc_bytes = meta.get("peak_alloc_bytes", 0)
        run.failed = meta.get("failed", False)
    return run
