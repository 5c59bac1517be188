"""Figures for training logs and evaluation reports.

Uses the object-oriented ``Figure`` API (no pyplot state), and strips PNG
metadata so repeated runs produce identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from .metrics import EvalReport

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "groundcot",
}
FIGSIZE = (6.0, 3.6)


def trailing_mean(values: Sequence[float], window: int) -> np.ndarray:
    """Mean of the last ``window`` values at every index (shorter at the start)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def _save(fig: Figure, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata={"Software": None})


def plot_training_curve(log: Sequence[dict], path: str | Path, window: int = 50) -> None:
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=FIGSIZE, layout="constrained")
        ax = fig.add_subplot()
        it = [e["iter"] for e in log]
        reward = [e["mean_reward"] for e in log]
        ax.plot(it, reward, color="0.75", lw=0.8, label="batch mean reward")
        ax.plot(it, trailing_mean(reward, window), color="C0", lw=1.6, label=f"trailing mean ({window})")
        ax.set_xlabel("iteration")
        ax.set_ylabel("total reward")
        ax.set_ylim(0, 1.02)
        ax2 = ax.twinx()
        ax2.plot(it, [e["mean_kl"] for e in log], color="C3", lw=0.9, label="mean KL to reference")
        ax2.set_ylabel("KL estimate")
        ax2.spines["right"].set_visible(True)
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="lower right", frameon=False)
        _save(fig, path)


def plot_report(report: EvalReport, path: str | Path) -> None:
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=FIGSIZE, layout="constrained")
        ax = fig.add_subplot()
        names = sorted(report.per_subset)
        if report.overall is not None:
            names.append("overall")
        rows = [report.per_subset.get(n, report.overall) for n in names]
        x = np.arange(len(names))
        width = 0.26
        for k, (attr, label) in enumerate((("recall", "R"), ("precision", "P"), ("df1", "DF1"))):
            ax.bar(x + (k - 1) * width, [getattr(r, attr) for r in rows], width, label=label)
        ax.set_xticks(x, names)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("score (IoU-grid mean)")
        if report.rejection_score is not None:
            ax.set_title(f"rejection score {report.rejection_score:.3f}")
        ax.legend(frameon=False, ncols=3, loc="lower right")
        _save(fig, path)
