"""Vessel-level classification metrics."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(predictions == labels))


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic.

    ``P(score_pos > score_neg) + 0.5 * P(score_pos == score_neg)`` over all
    positive/negative pairs, computed from tie-averaged ranks. Numerator and
    denominator are kept as exact integers (ranks are doubled to stay integral).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"length mismatch: {scores.shape} vs {labels.shape}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"AUC needs both classes, got {n_pos} positive and {n_neg} negative")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    # Doubled average rank for each tie group: first + last (1-based).
    _, first, counts = np.unique(sorted_scores, return_index=True, return_counts=True)
    doubled = np.empty(scores.size, dtype=np.int64)
    for start, count in zip(first, counts):
        doubled[start : start + count] = 2 * start + count + 1
    ranks2 = np.empty_like(doubled)
    ranks2[order] = doubled
    u2 = int(ranks2[pos].sum()) - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def auc_pairwise(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Brute-force double loop over positive/negative pairs (reference only)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    wins = 0.0
    pairs = 0
    for sp in scores[labels == 1]:
        for sn in scores[labels == 0]:
            pairs += 1
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                wins += 0.5
    if pairs == 0:
        raise ValueError("AUC needs both classes")
    return wins / pairs


def negative_recall(discarded: Sequence[int], informative_mask: np.ndarray) -> float | None:
    """Fraction of a bag's negative instances that were discarded; None if the bag has none."""
    mask = np.asarray(informative_mask, dtype=bool)
    negatives = ~mask
    if not negatives.any():
        return None
    hit = np.zeros_like(mask)
    hit[list(discarded)] = True
    return float((hit & negatives).sum() / negatives.sum())
