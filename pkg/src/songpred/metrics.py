"""Regression/classification metrics and segment-to-song aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UndefinedMetricError
from .ranking import average_ranks


@dataclass(frozen=True)
class RegressionReport:
    mse: float
    mae: float
    pearson: float
    spearman: float

    def to_dict(self) -> dict:
        return {"mse": self.mse, "mae": self.mae,
                "pearson": self.pearson, "spearman": self.spearman}


def aggregate_song_predictions(per_segment: np.ndarray) -> np.ndarray:
    """Mean prediction vector over a song's segments; rows are segments."""
    arr = np.asarray(per_segment, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError("need a non-empty (n_segments, n_tasks) array")
    return arr.mean(axis=0)


def mse_mae(preds, targets) -> tuple[float, float]:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.size == 0:
        raise ValueError(f"shape mismatch or empty input: {p.shape} vs {t.shape}")
    diff = p - t
    return float(np.mean(diff * diff)), float(np.mean(np.abs(diff)))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.shape[0] < 2:
        raise ValueError("pearson needs two equal-length vectors of size >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt(dx @ dx)
    sy = np.sqrt(dy @ dy)
    if sx == 0.0 or sy == 0.0:
        raise UndefinedMetricError("correlation undefined for constant input")
    return float((dx @ dy) / (sx * sy))


def spearman(x, y) -> float:
    """Pearson correlation of average-tie ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.shape[0] < 2:
        raise ValueError("spearman needs two equal-length vectors of size >= 2")
    return pearson(average_ranks(x), average_ranks(y))


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score+ > score-) + 0.5 * P(score+ = score-).

    Computed from average ranks, which handles ties exactly.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = s.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC requires both classes present")
    ranks = average_ranks(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1(predictions, labels, positive_class=1) -> float:
    """F1 for the positive class; 0 when precision + recall is 0."""
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape or p.size == 0:
        raise ValueError("predictions and labels must be equal-length, non-empty")
    tp = int(np.sum((p == positive_class) & (y == positive_class)))
    fp = int(np.sum((p == positive_class) & (y != positive_class)))
    fn = int(np.sum((p != positive_class) & (y == positive_class)))
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2.0 * tp / denom


def regression_report(preds, targets) -> RegressionReport:
    m, a = mse_mae(preds, targets)
    return RegressionReport(mse=m, mae=a, pearson=pearson(preds, targets),
                            spearman=spearman(preds, targets))
