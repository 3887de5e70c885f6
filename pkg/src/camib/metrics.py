"""Sentiment-style evaluation metrics: Acc7, Acc2 (with/without zero), weighted F1, MAE, Corr."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

SCORE_RANGE = 3.0


@dataclass
class MetricsReport:
    acc7: Optional[float] = None
    acc2_incl_zero: Optional[float] = None
    acc2_excl_zero: Optional[float] = None
    f1_weighted: Optional[float] = None
    mae: Optional[float] = None
    corr: Optional[float] = None
    n: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _arr(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1)


def seven_class(scores) -> np.ndarray:
    """Bin [-3, 3] into seven equal-width intervals (width 6/7); out-of-range values are clipped."""
    x = np.clip(_arr(scores), -SCORE_RANGE, SCORE_RANGE)
    bins = np.floor((x + SCORE_RANGE) / (2 * SCORE_RANGE / 7)).astype(np.int64)
    return np.minimum(bins, 6)


def acc7(pred, truth) -> float:
    return float(np.mean(seven_class(pred) == seven_class(truth)))


def binary_accuracy(tp: int, tn: int, fp: int, fn: int) -> float:
    return (tp + tn) / (tp + tn + fp + fn)


def acc2(pred, truth, exclude_zero: bool = False) -> float:
    """Negative (< 0) vs non-negative; with ``exclude_zero`` zero labels are dropped
    and the split becomes negative vs positive (> 0)."""
    p, t = _arr(pred), _arr(truth)
    if exclude_zero:
        keep = t != 0
        p, t = p[keep] > 0, t[keep] > 0
    else:
        p, t = p >= 0, t >= 0
    if t.size == 0:
        return float("nan")
    return float(np.mean(p == t))


def f1_weighted(pred_labels, true_labels) -> float:
    """Per-class F1 averaged with weights equal to class support."""
    p = np.asarray(pred_labels).reshape(-1)
    t = np.asarray(true_labels).reshape(-1)
    total = 0.0
    for cls in np.unique(t):
        tp = np.sum((p == cls) & (t == cls))
        fp = np.sum((p == cls) & (t != cls))
        fn = np.sum((p != cls) & (t == cls))
        denom = 2 * tp + fp + fn
        f1 = 2 * tp / denom if denom else 0.0
        total += f1 * np.sum(t == cls)
    return float(total / t.size)


def mae(pred, truth) -> float:
    return float(np.mean(np.abs(_arr(pred) - _arr(truth))))


def pearson(x, y) -> Optional[float]:
    """Pearson correlation; None when either side has zero variance."""
    x, y = _arr(x), _arr(y)
    dx, dy = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(dx @ dx)) * math.sqrt(float(dy @ dy))
    if denom == 0.0:
        return None
    return float(np.clip((dx @ dy) / denom, -1.0, 1.0))


def regression_report(pred, truth) -> MetricsReport:
    p, t = _arr(pred), _arr(truth)
    if p.size == 0:
        raise ValueError("cannot evaluate an empty split")
    nz = t != 0
    return MetricsReport(
        acc7=acc7(p, t),
        acc2_incl_zero=acc2(p, t),
        acc2_excl_zero=acc2(p, t, exclude_zero=True),
        f1_weighted=f1_weighted(p[nz] > 0, t[nz] > 0) if nz.any() else None,
        mae=mae(p, t),
        corr=pearson(p, t),
        n=int(p.size),
    )


def class_scores(labels, n_classes: int) -> np.ndarray:
    """Map class k to the signed score k - (K-1)/2, so lower classes read as negative."""
    return np.asarray(labels, dtype=np.float64) - (n_classes - 1) / 2.0


def classification_report(pred_labels, true_labels, n_classes: int) -> MetricsReport:
    """Acc2/F1 on binary labels derived from class sign; Acc7/MAE/Corr absent."""
    p = class_scores(pred_labels, n_classes)
    t = class_scores(true_labels, n_classes)
    if p.size == 0:
        raise ValueError("cannot evaluate an empty split")
    nz = t != 0
    return MetricsReport(
        acc2_incl_zero=acc2(p, t),
        acc2_excl_zero=acc2(p, t, exclude_zero=True),
        f1_weighted=f1_weighted(p[nz] > 0, t[nz] > 0) if nz.any() else None,
        n=int(p.size),
    )
