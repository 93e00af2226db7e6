"""ROC-AUC per class and aggregation over repeated runs."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import UsageError

logger = logging.getLogger(__name__)

UNDEFINED = float("nan")


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with midrank ties: (concordant + 0.5 * tied) / (n_pos * n_neg).

    Returns ``nan`` (the undefined marker) when only one class is present.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise UsageError(f"scores and labels differ in length: {s.shape} vs {y.shape}")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return UNDEFINED
    ranks = rankdata(s)  # average ranks for ties, O(N log N)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc_pairwise(scores, labels) -> float:
    """O(N^2) reference: compare every positive with every negative."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        return UNDEFINED
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (pos.size * neg.size))


def roc_curve(scores, labels):
    """False/true positive rates at every distinct threshold (for plotting)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    distinct = np.r_[np.nonzero(np.diff(s))[0], y.size - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    tpr = np.r_[0.0, tps / max(y.sum(), 1)]
    fpr = np.r_[0.0, fps / max((~y).sum(), 1)]
    return fpr, tpr


@dataclass
class EvalReport:
    class_names: List[str]
    per_class_auc: List[float]
    n_pos: List[int]
    n_neg: List[int]
    seed: Optional[int] = None
    split: str = "val"

    @property
    def mean_auc(self) -> float:
        defined = [a for a in self.per_class_auc if not math.isnan(a)]
        return float(np.mean(defined)) if defined else UNDEFINED

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class_name", "auc", "n_pos", "n_neg"])
            for row in zip(self.class_names, self.per_class_auc, self.n_pos, self.n_neg):
                w.writerow([row[0], _fmt(row[1]), row[2], row[3]])
            w.writerow(["mean", _fmt(self.mean_auc), sum(self.n_pos), sum(self.n_neg)])

    def __eq__(self, other):
        if not isinstance(other, EvalReport):
            return NotImplemented
        same_auc = np.array_equal(np.array(self.per_class_auc), np.array(other.per_class_auc), equal_nan=True)
        return (same_auc and self.class_names == other.class_names and self.n_pos == other.n_pos
                and self.n_neg == other.n_neg and self.split == other.split)


def _fmt(v: float) -> str:
    return "undefined" if math.isnan(v) else repr(float(v))


def evaluate_scores(scores: np.ndarray, labels: np.ndarray, class_names: Sequence[str],
                    seed: Optional[int] = None, split: str = "val") -> EvalReport:
    """Per-class AUC over columns of an [N, K] score matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise UsageError(f"scores {scores.shape} and labels {labels.shape} differ")
    aucs, n_pos, n_neg = [], [], []
    for k in range(labels.shape[1]):
        a = roc_auc(scores[:, k], labels[:, k])
        pos = int(labels[:, k].sum())
        if math.isnan(a):
            logger.warning("class %s has %d positives / %d negatives; AUC undefined and excluded from the mean",
                           class_names[k], pos, labels.shape[0] - pos)
        aucs.append(a)
        n_pos.append(pos)
        n_neg.append(int(labels.shape[0] - pos))
    return EvalReport(list(class_names), aucs, n_pos, n_neg, seed, split)


@dataclass
class Aggregate:
    class_names: List[str]
    mean: List[float]
    min: List[float]
    max: List[float]
    half_spread: List[float]
    std: List[float]
    mean_auc: float
    mean_auc_half_spread: float
    mean_auc_std: float
    per_run_mean_auc: List[float] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class_name", "mean_auc", "min", "max", "half_spread", "std"])
            for row in zip(self.class_names, self.mean, self.min, self.max, self.half_spread, self.std):
                w.writerow([row[0]] + [_fmt(v) for v in row[1:]])
            lo, hi = min(self.per_run_mean_auc), max(self.per_run_mean_auc)
            w.writerow(["Mean AUC", _fmt(self.mean_auc), _fmt(lo), _fmt(hi),
                        _fmt(self.mean_auc_half_spread), _fmt(self.mean_auc_std)])


def aggregate_runs(reports: Sequence[EvalReport]) -> Aggregate:
    """Per-class mean, min, max and half of (max - min) across runs, as in "mean +/- spread" tables.

    ``std`` is the sample standard deviation (ddof=1) when there is more than one run.
    """
    if not reports:
        raise UsageError("aggregate_runs needs at least one report")
    k = len(reports[0].per_class_auc)
    if any(len(r.per_class_auc) != k for r in reports):
        raise UsageError("reports disagree on the number of classes")
    mat = np.array([r.per_class_auc for r in reports], dtype=np.float64)
    ddof = 1 if len(reports) > 1 else 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-nan columns stay nan
        mean = np.nanmean(mat, axis=0)
        lo, hi = np.nanmin(mat, axis=0), np.nanmax(mat, axis=0)
        std = np.nanstd(mat, axis=0, ddof=ddof)
    run_means = np.array([r.mean_auc for r in reports])
    return Aggregate(
        class_names=list(reports[0].class_names),
        mean=mean.tolist(),
        min=lo.tolist(),
        max=hi.tolist(),
        half_spread=((hi - lo) / 2.0).tolist(),
        std=std.tolist(),
        mean_auc=float(run_means.mean()),
        mean_auc_half_spread=float((run_means.max() - run_means.min()) / 2.0),
        mean_auc_std=float(run_means.std(ddof=ddof)),
        per_run_mean_auc=run_means.tolist(),
    )

