"""Optional SVG figures. matplotlib is imported lazily; CSV files remain the canonical output."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import UsageError
from .metrics import roc_curve


def _pyplot():
    try:
        import matplotlib
    except ImportError:
        raise UsageError("SVG plots need matplotlib (pip install 'artifact[plots]')") from None
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def loss_curve_svg(report, path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for stage in (1, 2):
        pts = [(r.step, r.loss) for r in report.steps if r.stage == stage]
        if pts:
            s, v = zip(*pts)
            ax.plot(s, v, lw=0.8, label=f"stage {stage}")
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def roc_svg(scores: np.ndarray, labels: np.ndarray, class_names: Sequence[str], path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 5))
    for k, name in enumerate(class_names):
        y = labels[:, k]
        if 0 < y.sum() < len(y):
            fpr, tpr = roc_curve(scores[:, k], y)
            ax.plot(fpr, tpr, lw=0.8, label=name)
    ax.plot([0, 1], [0, 1], "k--", lw=0.5)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(fontsize=6, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
