"""Informativeness scoring of pool images and acquisition ranking.

Scores are computed from predictions alone; nothing on this path may look
at hidden annotation state.
"""
from __future__ import annotations

from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .detector import Prediction


class QueryStrategy(str, Enum):
    RANDOM = "random"
    ENTROPY = "entropy"


def entropy(probs: Sequence[float]) -> float:
    """Shannon entropy (natural log) of a probability vector, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=float)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def class_weights(
    counts: Sequence[int], clamp: tuple[float, float] = (0.1, 10.0)
) -> np.ndarray:
    """Add-one smoothed inverse-frequency weights over observed class counts.

    w_c = (sum(counts) + K) / (K * (counts[c] + 1)), clamped.  A balanced
    histogram (including the all-zero one) yields unit weights.
    """
    n = np.asarray(counts, dtype=float)
    k = n.size
    w = (n.sum() + k) / (k * (n + 1.0))
    return np.clip(w, clamp[0], clamp[1])


def image_query_score(preds: Sequence[Prediction], weights: Sequence[float]) -> float:
    """Sum of class-weighted prediction entropies; empty input scores 0."""
    w = np.asarray(weights, dtype=float)
    return float(sum(w[p.argmax_class - 1] * entropy(p.probs) for p in preds))


def rank_pool(
    pool_ids: Sequence[int],
    strategy: QueryStrategy,
    preds_by_image: Mapping[int, Sequence[Prediction]],
    weights: Sequence[float],
    rng: np.random.Generator,
) -> list[int]:
    """Order pool images for acquisition.

    Entropy ranks by descending query score with ties broken by ascending
    image id; random returns a uniform permutation of the pool.
    """
    ids = sorted(pool_ids)
    if strategy == QueryStrategy.RANDOM:
        return [ids[i] for i in rng.permutation(len(ids))]
    if strategy == QueryStrategy.ENTROPY:
        missing = [i for i in ids if i not in preds_by_image]
        if missing:
            raise ValueError(f"no predictions for pool images {missing[:5]}")
        scored = [(image_query_score(preds_by_image[i], weights), i) for i in ids]
        scored.sort(key=lambda t: (-t[0], t[1]))
        return [i for _, i in scored]
    raise ValueError(f"unknown strategy {strategy!r}")
