"""Command-line interface.

Subcommands:
  calibrate  compute per-layer thresholds for a task and write the audit file
  train      run one experiment per seed (config file + flag overrides)
  compare    steps-to-target and speedup table across finished run dirs
  verify     run the verification suite, write the verdict file
  report     text + CSV + figure report over finished run dirs

Flag precedence is CLI > config file > defaults. The worker-slot count for
multi-seed training comes from the SPARSEZO_WORKERS environment variable.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from . import harness


def _add_common_flags(sub):
    sub.add_argument("--config", help="key = value config file")
    sub.add_argument("--task", choices=harness.TASKS)
    sub.add_argument("--optimizer", choices=harness.OPTIMIZERS)
    sub.add_argument("--engine", choices=harness.ENGINES)
    sub.add_argument("--sparsity", type=float)
    sub.add_argument("--mask-side", dest="mask_side", choices=("small", "large"))
    sub.add_argument("--sparsify-interval", dest="sparsify_interval", type=int,
                     help="recalibrate magnitude thresholds every k steps")
    sub.add_argument("--epsilon", type=float, help="perturbation scale (default 1e-3)")
    sub.add_argument("--lr", help="learning rate, a float or 'theory'")
    sub.add_argument("--steps", type=int, help="total steps (default 20000)")
    sub.add_argument("--eval-every", dest="eval_every", type=int,
                     help="evaluation cadence in steps (default 100)")
    sub.add_argument("--batch-size", dest="batch_size", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--seeds", help="comma-separated seed list (multi-run)")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--dtype", choices=("f32", "f64"))
    sub.add_argument("--timing", action="store_true", default=None,
                     help="record real per-step wallclock in steps.csv "
                          "(breaks byte-reproducibility)")
    sub.add_argument("--dim", type=int)
    sub.add_argument("--cond", type=float)
    sub.add_argument("--widths", help="comma-separated MLP widths")
    sub.add_argument("--task-seed", dest="task_seed", type=int)


def _cli_values(args):
    keys = (
        "task", "optimizer", "engine", "sparsity", "mask_side",
        "sparsify_interval", "epsilon", "lr", "steps", "eval_every",
        "batch_size", "seed", "out", "dtype", "timing", "dim", "cond",
        "widths", "task_seed",
    )
    values = {}
    for key in keys:
        value = getattr(args, key, None)
        if value is None:
            continue
        if key in ("lr", "widths"):
            value = harness._coerce(key, str(value))
        values[key] = value
    return values


def _build_config(args):
    file_values = harness.parse_config_file(args.config) if args.config else {}
    seeds = None
    if getattr(args, "seeds", None):
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    elif "seeds" in file_values:
        seeds = [int(s) for s in str(file_values.pop("seeds")).split(",")]
    cfg = harness.make_config(file_values, _cli_values(args))
    return cfg, seeds


def _run_one(cfg):
    run = harness.run_experiment(cfg)
    return run.out_dir, run.failed


def cmd_train(args):
    cfg, seeds = _build_config(args)
    if not seeds:
        seeds = [cfg.seed]
    if cfg.out is None:
        print("error: train needs --out", file=sys.stderr)
        return 2
    configs = []
    for seed in seeds:
        out = cfg.out if len(seeds) == 1 else os.path.join(
            cfg.out, f"seed-{seed}"
        )
        configs.append(replace(cfg, seed=seed, out=out))
    workers = int(os.environ.get(harness.WORKERS_ENV, "1"))
    failed = False
    if workers > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for out_dir, run_failed in pool.map(_run_one, configs):
                failed = failed or run_failed
                print(f"run complete: {out_dir}" + (" (FAILED)" if run_failed else ""))
    else:
        for one in configs:
            out_dir, run_failed = _run_one(one)
            failed = failed or run_failed
            print(f"run complete: {out_dir}" + (" (FAILED)" if run_failed else ""))
    return 1 if failed else 0


def cmd_calibrate(args):
    from .masking import Masker, save_thresholds

    cfg, _ = _build_config(args)
    task, p = harness.build_task(cfg)
    masker = Masker.for_params(p, cfg.policy())
    if masker.thresholds is None:
        print(f"policy {policy.kind!r} uses no thresholds; nothing to write")
        return 0
    out = args.out or "thresholds.txt"
    if os.path.isdir(out):
        out = os.path.join(out, "thresholds.txt")
    save_thresholds(masker.thresholds, p, out)
    print(f"thresholds written: {out}")
    return 0


def cmd_compare(args):
    runs = [harness.load_run(d) for d in args.runs]
    metric = args.metric
    target = args.target
    if target is None:
        task, _ = harness.build_task(runs[0].config)
        target, default_metric = harness.default_target(runs[0].config, task)
        if metric is None:
            metric = default_metric
        if target is None:
            print("error: no default target for this task; pass --target",
                  file=sys.stderr)
            return 2
    if metric is None:
        metric = "eval_loss"
    comparison = harness.compare_runs(runs, target, metric)
    sys.stdout.write(comparison.to_text())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.txt"), "w",
                  encoding="utf-8") as fh:
            fh.write(comparison.to_text())
        with open(os.path.join(args.out, "comparison.csv"), "w",
                  encoding="utf-8") as fh:
            fh.write(comparison.to_csv())
    return 0


def cmd_verify(args):
    from . import checks

    out = args.out or "verdict.jsonl"
    if os.path.isdir(out):
        out = os.path.join(out, "verdict.jsonl")
    selected = None
    if args.only:
        wanted = [name.strip() for name in args.only.split(",") if name.strip()]
        unknown = [name for name in wanted if name not in checks.CHECKS_BY_NAME]
        if unknown:
            known = ", ".join(checks.CHECKS_BY_NAME)
            print(f"error: unknown checks {unknown}; known: {known}",
                  file=sys.stderr)
            return 2
        selected = [checks.CHECKS_BY_NAME[name] for name in wanted]
    results = checks.verify_suite(checks=selected, out_path=out,
                                  fast=args.fast)
    print(f"verdict written: {out}")
    return 0 if all(r.passed for r in results) else 1


def cmd_report(args):
    from . import reporting

    comparison = reporting.write_report(args.runs, args.out,
                                        target=args.target,
                                        metric=args.metric)
    sys.stdout.write(comparison.to_text())
    print(f"report written: {args.out}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="sparsezo",
        description="sparse and dense zeroth-order optimization experiments",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    train = subs.add_parser("train", help="run one or more seeds of an experiment")
    _add_common_flags(train)
    train.set_defaults(fn=cmd_train)

    calibrate = subs.add_parser("calibrate",
                                help="write per-layer thresholds for audit")
    _add_common_flags(calibrate)
    calibrate.set_defaults(fn=cmd_calibrate)

    compare = subs.add_parser("compare", help="compare finished runs")
    compare.add_argument("runs", nargs="+", help="run output directories")
    compare.add_argument("--target", type=float)
    compare.add_argument("--metric")
    compare.add_argument("--out")
    compare.set_defaults(fn=cmd_compare)

    verify = subs.add_parser("verify", help="run the verification suite")
    verify.add_argument("--out", help="verdict file (or directory)")
    verify.add_argument("--fast", action="store_true",
                        help="smoke-sized workloads, not the acceptance gate")
    verify.add_argument("--only", help="comma-separated check names")
    verify.set_defaults(fn=cmd_verify)

    report = subs.add_parser("report",
                             help="text + CSV + figures over finished runs")
    report.add_argument("runs", nargs="+", help="run output directories")
    report.add_argument("--target", type=float)
    report.add_argument("--metric")
    report.add_argument("--out", required=True)
    report.set_defaults(fn=cmd_report)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
