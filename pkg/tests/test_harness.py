import json
import os

import pytest

from sparsezo import StructuralError
from sparsezo import checks, cli, harness, models, oracle, zo


def small_cfg(**kw):
    base = dict(task="quadratic", optimizer="smezo", sparsity=0.5, dim=8,
                steps=30, eval_every=10, lr=1e-3, seed=3, dtype="f64")
    base.update(kw)
    return harness.ExperimentConfig(**base)


# -- config files -------------------------------------------------------------


def test_config_file_parse_and_precedence(tmp_path):
    cfg_file = tmp_path / "exp.cfg"
    cfg_file.write_text(
        "# comment\n"
        "task = quadratic\n"
        "optimizer = mezo\n"
        "steps = 100   # inline comment\n"
        "lr = theory\n"
        "widths = 8,8,4\n"
    )
    values = harness.parse_config_file(cfg_file)
    assert values["steps"] == 100
    assert values["lr"] == "theory"
    assert values["widths"] == (8, 8, 4)
    cfg = harness.make_config(values, {"steps": 7})
    assert cfg.steps == 7  # CLI overrides file
    assert cfg.optimizer == "mezo"
    assert cfg.epsilon == 1e-3  # default


def test_config_rejects_unknown_key(tmp_path):
    with pytest.raises(StructuralError):
        harness.make_config({"bogus": 1})


def test_config_file_malformed_line(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("steps 100\n")
    with pytest.raises(StructuralError):
        harness.parse_config_file(bad)


def test_config_echo_roundtrip(tmp_path):
    cfg = small_cfg()
    path = tmp_path / "config.echo"
    harness.write_config_echo(cfg, path)
    parsed = harness.parse_config_file(path)
    assert parsed["task"] == "quadratic"
    assert parsed["steps"] == 30
    assert parsed["sparsity"] == 0.5


def test_config_validation():
    with pytest.raises(ValueError):
        harness.ExperimentConfig(task="nope")
    with pytest.raises(ValueError):
        harness.ExperimentConfig(optimizer="sgd")
    with pytest.raises(ValueError):
        harness.ExperimentConfig(eval_every=0)


# -- runs ---------------------------------------------------------------------


def test_zero_steps_run_has_only_initial_row(tmp_path):
    cfg = small_cfg(steps=0, out=str(tmp_path / "run0"))
    run = harness.run_experiment(cfg)
    assert len(run.eval_rows) == 1
    assert run.eval_rows[0]["step"] == 0
    lines = (tmp_path / "run0" / "metrics.csv").read_text().splitlines()
    assert lines[0] == harness.METRICS_HEADER
    assert len(lines) == 2


def test_run_writes_expected_files(tmp_path):
    cfg = small_cfg(out=str(tmp_path / "run"))
    run = harness.run_experiment(cfg)
    names = sorted(os.listdir(tmp_path / "run"))
    assert names == ["config.echo", "metrics.csv", "run.json", "steps.csv"]
    steps_lines = (tmp_path / "run" / "steps.csv").read_text().splitlines()
    assert steps_lines[0] == harness.STEPS_HEADER
    assert len(steps_lines) == 31
    assert not run.failed
    meta = json.loads((tmp_path / "run" / "run.json").read_text())
    assert meta["total_steps"] == 30


def test_identical_runs_identical_bytes(tmp_path):
    outs = []
    for name in ("a", "b"):
        cfg = small_cfg(out=str(tmp_path / name))
        harness.run_experiment(cfg)
        outs.append({
            f: (tmp_path / name / f).read_bytes()
            for f in ("metrics.csv", "steps.csv", "config.echo")
        })
    for f in ("metrics.csv", "steps.csv"):
        assert outs[0][f] == outs[1][f]


def test_sparsify_interval_recalibrates():
    # With recalibration the thresholds track the drifting weights, so the
    # trajectory departs from the fixed-threshold run.
    finals = {}
    for interval in (0, 10):
        cfg = small_cfg(task="shifted", dim=16, steps=120, eval_every=40,
                        lr="theory", sparsity=0.75,
                        sparsify_interval=interval)
        finals[interval] = harness.run_experiment(cfg).eval_rows[-1]["eval_loss"]
    assert finals[0] != finals[10]


def test_fo_baseline_run(tmp_path):
    cfg = small_cfg(optimizer="fo", task="logistic", dim=8, steps=50,
                    lr=0.5, out=str(tmp_path / "fo"))
    run = harness.run_experiment(cfg)
    assert run.eval_rows[-1]["eval_loss"] < run.eval_rows[0]["eval_loss"]
    assert not os.path.exists(tmp_path / "fo" / "steps.csv")


def test_run_marks_failed_on_abort_storm(monkeypatch, tmp_path):
    from sparsezo.errors import StepAborted

    calls = {"n": 0}
    original = zo.step

    def flaky_step(loss_fn, p, cfg, t, masker, **kw):
        calls["n"] += 1
        if calls["n"] % 2 == 0:
            raise StepAborted("boom", step_seed=0)
        return original(loss_fn, p, cfg, t, masker, **kw)

    monkeypatch.setattr(zo, "step", flaky_step)
    run = harness.run_experiment(small_cfg())
    assert run.aborted_steps > 0
    assert run.failed


def test_load_run_roundtrip(tmp_path):
    cfg = small_cfg(out=str(tmp_path / "run"))
    run = harness.run_experiment(cfg)
    loaded = harness.load_run(str(tmp_path / "run"))
    assert [r["step"] for r in loaded.eval_rows] == [r["step"] for r in run.eval_rows]
    assert loaded.config.task == "quadratic"
    assert loaded.config.steps == 30
    assert loaded.peak_alloc_bytes == run.peak_alloc_bytes


# -- comparisons --------------------------------------------------------------


def fake_run(steps_reached, final=1.0, label_seed=0, wall=1.0):
    cfg = small_cfg(seed=label_seed)
    rows = [{"step": 0, "eval_loss": 10.0}]
    if steps_reached is not None:
        rows.append({"step": steps_reached, "eval_loss": 0.4})
    rows.append({"step": 20000, "eval_loss": final})
    run = harness.RunMetrics(config=cfg, eval_rows=sorted(rows, key=lambda r: r["step"]))
    run.wallclock_s = wall
    return run


def test_compare_identical_runs_speedup_one():
    a = fake_run(5000, label_seed=1)
    b = fake_run(5000, label_seed=2)
    comp = harness.compare_runs([a, b], target=0.5)
    assert all(row.speedup == 1.0 for row in comp.rows)


def test_compare_speedup_three_and_a_half():
    fast = fake_run(5000, label_seed=1)
    slow = fake_run(17500, label_seed=2)
    comp = harness.compare_runs([fast, slow], target=0.5)
    by_label = {row.label: row for row in comp.rows}
    assert by_label["smezo-r0.5-seed1"].speedup == pytest.approx(3.5)
    assert by_label["smezo-r0.5-seed2"].speedup == pytest.approx(1.0)


def test_compare_not_reached_marker():
    reached = fake_run(5000, label_seed=1)
    never = fake_run(None, label_seed=2)
    comp = harness.compare_runs([reached, never], target=0.5)
    by_label = {row.label: row for row in comp.rows}
    assert by_label["smezo-r0.5-seed2"].steps_to_target is None
    assert by_label["smezo-r0.5-seed2"].speedup is None
    assert "not reached" in comp.to_text()


def test_compare_permutation_invariant():
    runs = [fake_run(5000, label_seed=1), fake_run(700, label_seed=2),
            fake_run(None, label_seed=3)]
    a = harness.compare_runs(runs, target=0.5).to_csv()
    b = harness.compare_runs(list(reversed(runs)), target=0.5).to_csv()
    assert a == b


def test_compare_requires_shared_schedule():
    a = fake_run(10, label_seed=1)
    b = fake_run(10, label_seed=2)
    b.config = harness.ExperimentConfig(task="logistic", eval_every=10)
    with pytest.raises(StructuralError):
        harness.compare_runs([a, b], target=0.5)


# -- allocation report --------------------------------------------------------


def test_allocation_report_requires_instrumentation():
    a = fake_run(10)
    b = fake_run(10)
    with pytest.raises(StructuralError):
        harness.allocation_report(a, b)


def test_allocation_singleton_layer_ratio_near_one():
    # With one layer there is nothing to stream: fused peak is ~2 value
    # buffers, the naive path holds the same order of copies.
    results = {}
    for engine in ("fused", "twocopy"):
        cfg = harness.ExperimentConfig(
            task="quadratic", optimizer="smezo", sparsity=0.5, dim=64,
            steps=5, eval_every=5, lr=1e-3, dtype="f64", engine=engine,
        )
        results[engine] = harness.run_experiment(cfg)
    report = harness.allocation_report(results["fused"], results["twocopy"])
    assert 0.2 <= report["ratio"] <= 1.1


def test_naive_path_materializes_copies():
    cfg = harness.ExperimentConfig(
        task="mlp", optimizer="mezo", engine="twocopy", steps=3,
        eval_every=3, lr=1e-3, dtype="f64", mlp_width=16, mlp_layers=4,
    )
    run = harness.run_experiment(cfg)
    task = models.equal_width_mlp_task(width=16, n_layers=4)
    p = task.template()
    assert run.peak_alloc_bytes >= p.total_params * 8


# -- CLI ----------------------------------------------------------------------


def test_cli_train_and_compare(tmp_path, capsys):
    out_a = str(tmp_path / "a")
    out_b = str(tmp_path / "b")
    assert cli.main([
        "train", "--task", "quadratic", "--optimizer", "smezo",
        "--sparsity", "0.5", "--dim", "8", "--steps", "30",
        "--eval-every", "10", "--lr", "1e-3", "--seed", "3", "--out", out_a,
        "--dtype", "f64",
    ]) == 0
    assert cli.main([
        "train", "--task", "quadratic", "--optimizer", "mezo", "--dim", "8",
        "--steps", "30", "--eval-every", "10", "--lr", "1e-3", "--seed", "3",
        "--out", out_b, "--dtype", "f64",
    ]) == 0
    assert cli.main(["compare", out_a, out_b, "--target", "0.9",
                     "--metric", "grad_norm_sq"]) == 0
    text = capsys.readouterr().out
    assert "steps-to-target" in text


def test_cli_train_multi_seed(tmp_path):
    out = str(tmp_path / "multi")
    assert cli.main([
        "train", "--task", "quadratic", "--optimizer", "mezo", "--dim", "4",
        "--steps", "10", "--eval-every", "5", "--lr", "1e-3",
        "--seeds", "1,2", "--out", out,
    ]) == 0
    assert sorted(os.listdir(out)) == ["seed-1", "seed-2"]


def test_cli_train_parallel_workers_match_sequential(tmp_path, monkeypatch):
    argv = ["train", "--task", "quadratic", "--optimizer", "mezo", "--dim",
            "4", "--steps", "10", "--eval-every", "5", "--lr", "1e-3",
            "--seeds", "1,2"]
    monkeypatch.delenv(harness.WORKERS_ENV, raising=False)
    assert cli.main(argv + ["--out", str(tmp_path / "seq")]) == 0
    monkeypatch.setenv(harness.WORKERS_ENV, "2")
    assert cli.main(argv + ["--out", str(tmp_path / "par")]) == 0
    for seed in (1, 2):
        a = (tmp_path / "seq" / f"seed-{seed}" / "metrics.csv").read_bytes()
        b = (tmp_path / "par" / f"seed-{seed}" / "metrics.csv").read_bytes()
        assert a == b


def test_cli_train_with_config_file(tmp_path):
    cfg_file = tmp_path / "exp.cfg"
    cfg_file.write_text(
        "task = quadratic\noptimizer = mezo\ndim = 4\nsteps = 10\n"
        "eval_every = 5\nlr = 1e-3\n"
    )
    out = str(tmp_path / "run")
    assert cli.main(["train", "--config", str(cfg_file), "--steps", "8",
                     "--out", out]) == 0
    echoed = harness.parse_config_file(os.path.join(out, "config.echo"))
    assert echoed["steps"] == 8  # CLI wins over file


def test_cli_calibrate(tmp_path):
    out = str(tmp_path)
    assert cli.main([
        "calibrate", "--task", "mlp", "--optimizer", "smezo",
        "--sparsity", "0.75", "--out", out,
    ]) == 0
    lines = (tmp_path / "thresholds.txt").read_text().splitlines()
    assert any("fc0.weight = " in line for line in lines)


def test_cli_report_renders_figures(tmp_path):
    out_a = str(tmp_path / "a")
    cli.main([
        "train", "--task", "quadratic", "--optimizer", "mezo", "--dim", "8",
        "--steps", "30", "--eval-every", "10", "--lr", "1e-3", "--out", out_a,
    ])
    rep = str(tmp_path / "rep")
    assert cli.main(["report", out_a, "--target", "0.9",
                     "--metric", "grad_norm_sq", "--out", rep]) == 0
    for name in ("report.txt", "comparison.csv", "convergence.png",
                 "steps_to_target.png"):
        path = tmp_path / "rep" / name
        assert path.exists() and path.stat().st_size > 0


def test_cli_verify_fast_subset(tmp_path):
    out = str(tmp_path / "verdict.jsonl")
    rc = cli.main(["verify", "--fast", "--only",
                   "two-copy-equivalence,dual-path-equivalence", "--out", out])
    assert rc == 0
    lines = [json.loads(line) for line in open(out)]
    assert {entry["check"] for entry in lines} == {
        "two-copy-equivalence", "dual-path-equivalence"
    }
    assert all(entry["pass"] for entry in lines)


# -- mutation tests: planted bugs must trip the corresponding check -----------


def test_unbiasedness_check_catches_wrong_denominator():
    def buggy_estimator(loss_fn, p, eps, masker, n, seed, step_seed=0, **kw):
        # forgets the factor two in the central difference
        mean, se, d = oracle.mc_zo_mean(loss_fn, p, eps, masker, n, seed,
                                        step_seed=step_seed)
        return 2.0 * mean, 2.0 * se, d

    result = checks.check_unbiasedness(n_samples=20000,
                                       estimator=buggy_estimator)
    assert not result.passed


def test_restore_check_catches_unfrozen_mask():
    class UnfrozenCycle(zo.PerturbCycle):
        # recompute the magnitude mask from current (perturbed) values at
        # every phase instead of freezing the +eps phase's masks
        def _mask_for(self, layer):
            if not self.masker.dynamic:
                return super()._mask_for(layer)
            return self.masker.layer_mask(layer, base_values=layer.values)

        @property
        def frozen_masks(self):
            return None

    result = checks.check_restore_drift(steps=300, cycle_cls=UnfrozenCycle)
    assert not result.passed


def test_restore_check_passes_with_real_cycle():
    result = checks.check_restore_drift(steps=300)
    assert result.passed, result.detail
