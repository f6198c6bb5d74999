"""Report rendering: comparison text/CSV plus matplotlib figures.

Figures are a convenience layer over the delimited outputs; the CSV files
remain the reproducible contract. Everything renders through the Agg
backend so reports work headless.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from . import harness


def _series(run, metric):
    xs, ys = [], []
    for row in run.eval_rows:
        value = row.get(metric)
        if value is not None:
            xs.append(row["step"])
            ys.append(value)
    return xs, ys


def render_convergence(runs, out_png, metric="eval_loss", labels=None,
                       target=None):
    """Loss-versus-step curves for a set of runs, written to a PNG file."""
    labels = labels or [harness.run_label(r) for r in runs]
    fig, ax = plt.subplots(figsize=(7.0, 4.4))
    for run, label in zip(runs, labels):
        xs, ys = _series(run, metric)
        ax.plot(xs, ys, label=label, linewidth=1.4)
    if target is not None:
        ax.axhline(target, color="gray", linestyle="--", linewidth=1.0,
                   label="target")
    ax.set_xlabel("step")
    ax.set_ylabel(metric)
    if all(y > 0 for run in runs for y in _series(run, metric)[1]):
        ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)


def render_steps_to_target(comparison, out_png):
    """Bar chart of steps-to-target from a Comparison."""
    labels = [row.label for row in comparison.rows]
    reached = [row.steps_to_target for row in comparison.rows]
    heights = [s if s is not None else 0 for s in reached]
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    bars = ax.bar(range(len(labels)), heights, color="#4878a8")
    for i, (bar, steps) in enumerate(zip(bars, reached)):
        if steps is None:
            ax.text(i, 0.02 * max(heights + [1]), "not reached",
                    rotation=90, ha="center", va="bottom", fontsize=8)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(f"steps to {comparison.metric} <= {comparison.target:g}")
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)


def write_report(run_dirs, out_dir, target=None, metric=None):
    """Full report for a set of run directories.

    Writes report.txt and comparison.csv next to the rendered figures
    (convergence.png, steps_to_target.png) and returns the Comparison.
    """
    runs = [harness.load_run(d) for d in run_dirs]
    if metric is None:
        metric = "grad_norm_sq" if runs[0].config.task == "quadratic" else "eval_loss"
    if target is None:
        task, _ = harness.build_task(runs[0].config)
        target, metric_default = harness.default_target(runs[0].config, task)
        if metric is None:
            metric = metric_default
        if target is None:
            raise ValueError(
                "no default target for this task; pass one explicitly"
            )
    comparison = harness.compare_runs(runs, target, metric)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(comparison.to_text())
    with open(os.path.join(out_dir, "comparison.csv"), "w",
              encoding="utf-8") as fh:
        fh.write(comparison.to_csv())
    render_convergence(runs, os.path.join(out_dir, "convergence.png"),
                       metric=metric, target=target)
    render_steps_to_target(comparison,
                           os.path.join(out_dir, "steps_to_target.png"))
    return comparison
