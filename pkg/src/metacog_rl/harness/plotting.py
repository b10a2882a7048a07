"""PNG figures rendered next to the metrics tables."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_STAGES = ("direct", "decomposition", "reflection")
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_run(rows: Sequence[dict], out: Path, baseline: Optional[float] = None) -> list[Path]:
    """Per-stage valid groups per step, and held-out accuracy when evaluated."""
    out = Path(out)
    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    bottom = [0] * len(rows)
    for stage in _STAGES:
        vals = [r[f"valid_{stage}"] for r in rows]
        ax.bar(steps, vals, bottom=bottom, width=1.0, label=stage)
        bottom = [b + v for b, v in zip(bottom, vals)]
    ax.set_xlabel("training step")
    ax.set_ylabel("valid groups")
    ax.legend(loc="upper right", fontsize="small")
    paths = [_save(fig, out / "stage_groups.png")]

    evals = [(r["step"], r["eval_accuracy"]) for r in rows if r["eval_accuracy"] is not None]
    if evals:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        xs = [0] + [s for s, _ in evals] if baseline is not None else [s for s, _ in evals]
        ys = [baseline] + [a for _, a in evals] if baseline is not None else [a for _, a in evals]
        ax.plot(xs, ys, marker=".")
        ax.set_xlabel("training step")
        ax.set_ylabel("held-out accuracy")
        ax.set_ylim(0, 1)
        paths.append(_save(fig, out / "eval_accuracy.png"))
    return paths


def plot_compare(report, out: Path) -> list[Path]:
    """Valid groups per step and cumulative valid groups against generated batches, both modes."""
    out = Path(out)
    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 3.5))
    for mode, color in (("metacog", "tab:blue"), ("dapo-only", "tab:orange")):
        for i, s in enumerate(report.seeds):
            series = s.series[mode]
            label = mode if i == 0 else None
            left.plot([r["step"] for r in series], [r["valid_groups"] for r in series], color=color,
                      alpha=0.3, label=label)
            right.plot([r["cumulative_batches"] for r in series], [r["cumulative_valid"] for r in series],
                       color=color, alpha=0.3, label=label)
    left.set_xlabel("training step")
    left.set_ylabel("valid groups")
    right.set_xlabel("cumulative generated batches")
    right.set_ylabel("cumulative valid groups")
    left.legend(fontsize="small")
    return [_save(fig, out / "compare.png")]


def plot_variance(record: dict, out: Path) -> list[Path]:
    out = Path(out)
    stages = list(record["stages"])
    var = [record["stages"][s]["variance"] for s in stages]
    hw = [record["stages"][s]["halfwidth"] for s in stages]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(stages, var, yerr=hw, capsize=4)
    ax.set_ylabel("trace of gradient covariance")
    if all(v > 0 for v in var):
        ax.set_yscale("log")
    return [_save(fig, out / "variance.png")]
