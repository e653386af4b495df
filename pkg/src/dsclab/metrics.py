"""OOD evaluation metrics and the empirical 1-D Wasserstein-1 distance.

Scores follow the "higher = more in-distribution" convention. For FPR@TPR the
OOD set is the positive class and detection fires when ``score <= threshold``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


def _vec(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def _needed_count(tpr: float, n: int) -> int:
    # smallest k with k / n >= tpr, evaluated in floating point like any scan would
    k = max(1, math.ceil(tpr * n))
    while k > 1 and (k - 1) / n >= tpr:
        k -= 1
    while k < n and k / n < tpr:
        k += 1
    return k


def fpr_at_tpr(id_scores, ood_scores, tpr: float = 0.95) -> float:
    """False-positive rate on ID at the first threshold reaching ``tpr`` recall of OOD."""
    if not 0.0 < tpr < 1.0:
        raise ValueError("tpr must lie in (0, 1)")
    s_id = _vec(id_scores, "id_scores")
    s_ood = np.sort(_vec(ood_scores, "ood_scores"))
    k = _needed_count(tpr, s_ood.size)
    threshold = s_ood[k - 1]
    return float(np.count_nonzero(s_id <= threshold) / s_id.size)


def auroc(id_scores, ood_scores) -> float:
    """P(ID score > OOD score) with ties counted one half."""
    s_id = _vec(id_scores, "id_scores")
    s_ood = _vec(ood_scores, "ood_scores")
    n, m = s_id.size, s_ood.size
    ranks = rankdata(np.concatenate([s_id, s_ood]), method="average")
    u = ranks[:n].sum() - n * (n + 1) / 2.0
    return float(u / (n * m))


def aupr(scores_pos, scores_neg, positive_is_high: bool = True) -> float:
    """Average precision: sum over distinct thresholds of (R_i - R_{i-1}) * P_i."""
    pos = _vec(scores_pos, "scores_pos")
    neg = _vec(scores_neg, "scores_neg")
    if not positive_is_high:
        pos, neg = -pos, -neg
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    order = np.argsort(-scores, kind="mergesort")
    scores, is_pos = scores[order], is_pos[order]
    tp = np.cumsum(is_pos)
    fp = np.cumsum(1.0 - is_pos)
    # last index of each run of equal scores closes a threshold
    last = np.r_[np.flatnonzero(np.diff(scores) != 0.0), scores.size - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / pos.size
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def wasserstein1(a, b) -> float:
    """Exact W1 between two empirical 1-D distributions (quantile-function form)."""
    a = np.sort(_vec(a, "a"))
    b = np.sort(_vec(b, "b"))
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    n, m = a.size, b.size
    # breakpoints of both quantile functions, in exact integer arithmetic over n*m
    cuts = np.union1d(np.arange(n + 1) * m, np.arange(m + 1) * n)
    lo, hi = cuts[:-1], cuts[1:]
    width = (hi - lo) / (n * m)
    ia = lo // m
    ib = lo // n
    return float(np.sum(width * np.abs(a[ia] - b[ib])))


@dataclass(frozen=True)
class EvalRecord:
    fpr_at_95: float
    fpr_at_98: float
    auroc: float
    aupr_in: float
    aupr_out: float
    n_id: int
    n_ood: int


def evaluate(id_scores, ood_scores) -> EvalRecord:
    s_id = _vec(id_scores, "id_scores")
    s_ood = _vec(ood_scores, "ood_scores")
    return EvalRecord(
        fpr_at_95=fpr_at_tpr(s_id, s_ood, 0.95),
        fpr_at_98=fpr_at_tpr(s_id, s_ood, 0.98),
        auroc=auroc(s_id, s_ood),
        aupr_in=aupr(s_id, s_ood, positive_is_high=True),
        aupr_out=aupr(s_ood, s_id, positive_is_high=False),
        n_id=s_id.size,
        n_ood=s_ood.size,
    )
