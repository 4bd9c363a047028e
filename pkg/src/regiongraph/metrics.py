"""Evaluation metrics: top-k accuracy and mean average precision."""

from __future__ import annotations

import numpy as np


def top_k_accuracy(scores: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Fraction of rows whose true label is among the k highest scores.

    Ties are broken by class index so results are deterministic.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels, dtype=int)
    k = min(k, scores.shape[1])
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(order == labels[:, None], axis=1)))


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """All-points interpolated AP of one class.

    Precision at each rank is replaced by the maximum precision at any lower
    rank (higher recall); AP sums it over the recall increments.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = positives.sum()
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(interp[hits]) / n_pos)


def mean_average_precision(scores: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """mAP over classes that have at least one positive; also returns per-class AP (NaN if undefined)."""
    scores = np.asarray(scores)
    targets = np.asarray(targets)
    per_class = np.array([average_precision(scores[:, c], targets[:, c] > 0) for c in range(scores.shape[1])])
    defined = per_class[~np.isnan(per_class)]
    return (float(defined.mean()) if defined.size else float("nan")), per_class


def confusion_matrix(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=int)
    np.add.at(cm, (np.asarray(labels, dtype=int), np.asarray(pred, dtype=int)), 1)
    return cm
