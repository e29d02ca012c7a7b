"""
Evaluation metrics: MAE, RMSE, AUROC and Spearman rank correlation.

All functions take flat prediction and target arrays of equal length (at
least two samples). AUROC expects binary 0/1 targets and uses the rank-sum
statistic with average ranks for tied scores.
"""

from __future__ import annotations

import math

import numpy as np

from .enums import MetricKind
from .exceptions import ContractViolation, UndefinedMetricError


def _pair(preds: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ContractViolation(f"predictions {p.shape} and targets {t.shape} differ in size")
    if p.size < 2:
        raise ContractViolation(f"metrics need at least 2 samples, got {p.size}")
    return p, t


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(x, dtype=np.float64).ravel()
    order = np.argsort(x, kind="mergesort")
    _, first, counts = np.unique(x[order], return_index=True, return_counts=True)
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(first + (counts + 1) / 2.0, counts)
    return ranks


def mae(preds: np.ndarray, targets: np.ndarray) -> float:
    p, t = _pair(preds, targets)
    return float(np.mean(np.abs(p - t)))


def rmse(preds: np.ndarray, targets: np.ndarray) -> float:
    p, t = _pair(preds, targets)
    return float(math.sqrt(np.mean((p - t) ** 2)))


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability that a random positive outscores a random negative (ties count half)."""
    s, y = _pair(scores, labels)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ContractViolation("auroc needs binary 0/1 labels")
    positives = int(np.sum(y == 1.0))
    negatives = y.size - positives
    if positives == 0 or negatives == 0:
        raise UndefinedMetricError("auroc is undefined when only one class is present")
    rank_sum = float(np.sum(average_ranks(s)[y == 1.0]))
    return (rank_sum - positives * (positives + 1) / 2.0) / (positives * negatives)


def spearman(preds: np.ndarray, targets: np.ndarray) -> float:
    """Pearson correlation of the average ranks."""
    p, t = _pair(preds, targets)
    a = average_ranks(p)
    b = average_ranks(t)
    a -= a.mean()
    b -= b.mean()
    denom = math.sqrt(float(np.sum(a * a)) * float(np.sum(b * b)))
    if denom == 0.0:
        raise UndefinedMetricError("spearman is undefined for a constant series")
    return float(np.clip(np.sum(a * b) / denom, -1.0, 1.0))


_METRICS = {
    MetricKind.MAE: mae,
    MetricKind.RMSE: rmse,
    MetricKind.AUROC: auroc,
    MetricKind.SPEARMAN: spearman,
}


def compute_metric(preds: np.ndarray, targets: np.ndarray, kind: MetricKind) -> float:
    return _METRICS[kind](preds, targets)
