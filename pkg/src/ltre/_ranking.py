"""Shared ranking-selection primitives.

Every retrieval surface in the package orders candidates the same way:
score descending, ties broken by ascending ordinal. Keeping the selection
logic in one place makes that tie-break exact everywhere.
"""

from __future__ import annotations

import numpy as np


def topn_indices(scores: np.ndarray, n: int) -> np.ndarray:
    """Indices of the top-n scores, score descending then index ascending.

    Exact under ties: the candidate cut uses the n-th largest value as a
    threshold so boundary ties are never split arbitrarily.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    total = scores.shape[0]
    n_eff = min(n, total)
    if n_eff == 0:
        return np.empty(0, dtype=np.int64)
    if n_eff == total:
        cand = np.arange(total, dtype=np.int64)
    else:
        kth = np.partition(scores, total - n_eff)[total - n_eff]
        cand = np.nonzero(scores >= kth)[0]
    order = np.lexsort((cand, -scores[cand]))
    return cand[order][:n_eff].astype(np.int64, copy=False)


def rank_all(ordinals: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Permutation sorting (ordinal, score) pairs by score desc, ordinal asc."""
    return np.lexsort((ordinals, -scores))
