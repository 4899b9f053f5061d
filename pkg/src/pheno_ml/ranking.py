"""Top-fraction and proportional-allocation arithmetic shared across modules."""

import math
from typing import List, Sequence

import numpy as np


def top_count(fraction: float, p: int) -> int:
    """Number of items kept by a top-``fraction`` cut, ceil(fraction * p)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    # 0.3 * 10 is 3.0000000000000004 in floating point
    return min(p, math.ceil(round(fraction * p, 9)))


def rank_desc(scores: Sequence[float], names: Sequence[str]) -> List[int]:
    """Indices ordered by descending score, ties by ascending name."""
    scores = np.asarray(scores, dtype=float)
    return sorted(range(len(names)), key=lambda j: (-scores[j], names[j]))


def top_names(scores: Sequence[float], names: Sequence[str], fraction: float) -> List[str]:
    order = rank_desc(scores, names)
    return [names[j] for j in order[: top_count(fraction, len(names))]]


def largest_remainder(total: int, weights: Sequence[float]) -> np.ndarray:
    """Split ``total`` in proportion to ``weights``; leftovers go to the largest fractions."""
    weights = np.asarray(weights, dtype=float)
    shares = total * weights / weights.sum()
    quotas = np.floor(shares).astype(int)
    leftover = total - int(quotas.sum())
    order = sorted(range(weights.size), key=lambda i: (-(shares[i] - quotas[i]), i))
    for i in order[:leftover]:
        quotas[i] += 1
    return quotas
