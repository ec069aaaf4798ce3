"""AUC and RMSE over pooled prediction records.

Predictions from all valid positions of all sequences are pooled into one
record set before scoring; there is no per-student averaging.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value for the given records."""


@dataclass(frozen=True)
class PredictionRecord:
    prob: float
    label: int


def _as_arrays(records: Sequence[PredictionRecord]) -> tuple[np.ndarray, np.ndarray]:
    probs = np.asarray([r.prob for r in records], dtype=np.float64)
    labels = np.asarray([r.label for r in records], dtype=np.int64)
    return probs, labels


def auc(records: Sequence[PredictionRecord]) -> float:
    probs, labels = _as_arrays(records)
    return auc_from_arrays(probs, labels)


def auc_from_arrays(probs: Iterable[float], labels: Iterable[int]) -> float:
    """Area under the ROC curve, ties counted 1/2 (Mann-Whitney convention).

    Sort-based O(n log n); raises UndefinedMetricError unless both classes
    are present.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.shape != labels.shape or probs.ndim != 1:
        raise ValueError("probs and labels must be 1-d arrays of equal length")
    if not np.isfinite(probs).all():
        raise ValueError("probs must be finite")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise ValueError("labels must be binary")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = _average_ranks(probs)
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def rmse(records: Sequence[PredictionRecord]) -> float:
    probs, labels = _as_arrays(records)
    return rmse_from_arrays(probs, labels)


def rmse_from_arrays(probs: Iterable[float], labels: Iterable[float]) -> float:
    """sqrt(mean((prob - label)^2)) over the given records."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape or probs.ndim != 1:
        raise ValueError("probs and labels must be 1-d arrays of equal length")
    if probs.size == 0:
        raise UndefinedMetricError("RMSE of an empty record set is undefined")
    return float(np.sqrt(np.mean((probs - labels) ** 2)))
