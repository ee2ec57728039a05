"""Pairwise ranking losses and their gradients with respect to relevance scores.

Two variants:
- plain pairwise logistic ("ranknet"): log(1 + exp(r_t - r_s)) for a pair
  whose first member carries the strictly higher label;
- position-aware ("lambdarank"): the same term weighted by |delta M|, the
  absolute change of a ranking metric when the two candidates swap positions.

Swap deltas are computed over the candidate list alone: during training only
the retrieved candidates exist, so the metric is defined on them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

VALID_METRICS = ("mrr@10", "ndcg@10")


@dataclass
class LossKind:
    variant: str  # "ranknet" | "lambdarank"
    metric: str = "mrr@10"  # swap metric, lambdarank only

    def __post_init__(self) -> None:
        if self.variant not in ("ranknet", "lambdarank"):
            raise ValueError(f"unknown loss variant {self.variant!r}")
        if self.variant == "lambdarank" and self.metric not in VALID_METRICS:
            raise ValueError(f"unknown lambdarank metric {self.metric!r}")

    @classmethod
    def parse(cls, text: str) -> "LossKind":
        """Parse "ranknet" or "lambdarank:<metric>" (metric defaults to mrr@10)."""
        if ":" in text:
            variant, metric = text.split(":", 1)
            return cls(variant=variant, metric=metric)
        return cls(variant=text)


@dataclass
class ScoredCandidateList:
    """One query's candidates: ordinals, scores, integer labels, 1-based ranks."""

    ordinals: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    positions: np.ndarray

    def __post_init__(self) -> None:
        self.ordinals = np.asarray(self.ordinals, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        L = len(self.ordinals)
        for name in ("scores", "labels", "positions"):
            if len(getattr(self, name)) != L:
                raise ValueError(f"{name} length != ordinals length {L}")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("candidate scores must be finite")

    def __len__(self) -> int:
        return len(self.ordinals)

    @classmethod
    def from_ranked(
        cls, ordinals: np.ndarray, scores: np.ndarray, labels: np.ndarray
    ) -> "ScoredCandidateList":
        L = len(ordinals)
        return cls(
            ordinals=ordinals,
            scores=scores,
            labels=labels,
            positions=np.arange(1, L + 1, dtype=np.int64),
        )


def ranknet(r_s: float, r_t: float) -> float:
    """log(1 + exp(r_t - r_s)) in the overflow-safe form."""
    d = r_t - r_s
    return max(d, 0.0) + math.log1p(math.exp(-abs(d)))


def _sigmoid(x: np.ndarray | float) -> np.ndarray | float:
    return np.where(
        np.asarray(x) >= 0,
        1.0 / (1.0 + np.exp(-np.abs(x))),
        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))),
    )


def ranknet_grad(r_s: float, r_t: float) -> tuple[float, float]:
    """(d/dr_s, d/dr_t) of ranknet: (-sigma(r_t - r_s), +sigma(r_t - r_s))."""
    sig = float(_sigmoid(r_t - r_s))
    return -sig, sig


def lambdarank(
    r_s: float, r_t: float, s: int, t: int, delta: float
) -> tuple[float, float, float]:
    """Loss and gradients of |delta M| * ranknet(r_s, r_t). Positions are unused
    beyond having determined ``delta``; they are kept for interface clarity."""
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    g_s, g_t = ranknet_grad(r_s, r_t)
    return delta * ranknet(r_s, r_t), delta * g_s, delta * g_t


def _metric_value_mrr(first_rel_pos: int | None, k: int) -> float:
    if first_rel_pos is None or first_rel_pos > k:
        return 0.0
    return 1.0 / first_rel_pos


def delta_metric(
    metric: str,
    s: int,
    t: int,
    labels: np.ndarray | list[int],
    k: int,
    rel_threshold: int = 1,
) -> float:
    """|M(list) - M(list with positions s and t swapped)| on the candidate list.

    ``labels`` are indexed by rank: labels[0] is the grade at position 1.
    For "mrr" only the first position holding a grade >= rel_threshold
    matters; for "ndcg" gains are 2^grade - 1, discounts 1/log2(rank+1), and
    the ideal ranking is built from the candidate labels themselves (the swap
    leaves it unchanged).
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if not (1 <= s < t <= n):
        raise ValueError(f"need 1 <= s < t <= {n}, got s={s}, t={t}")
    if metric == "mrr":
        rel = labels >= rel_threshold
        if s > k and t > k:
            return 0.0
        rel_positions = np.nonzero(rel)[0] + 1
        before = _metric_value_mrr(
            int(rel_positions[0]) if len(rel_positions) else None, k
        )
        swapped = rel.copy()
        swapped[s - 1], swapped[t - 1] = rel[t - 1], rel[s - 1]
        swapped_positions = np.nonzero(swapped)[0] + 1
        after = _metric_value_mrr(
            int(swapped_positions[0]) if len(swapped_positions) else None, k
        )
        return abs(before - after)
    if metric == "ndcg":
        gains = (2.0**labels) - 1.0
        ideal = np.sort(gains)[::-1][:k]
        idcg = float((ideal / np.log2(np.arange(2, len(ideal) + 2))).sum())
        if idcg == 0.0:
            return 0.0
        disc_s = 1.0 / math.log2(s + 1) if s <= k else 0.0
        disc_t = 1.0 / math.log2(t + 1) if t <= k else 0.0
        ddcg = (gains[s - 1] - gains[t - 1]) * (disc_t - disc_s)
        return abs(ddcg) / idcg
    raise ValueError(f"unknown swap metric {metric!r}")


def _pair_deltas(
    metric: str, k: int, cands: ScoredCandidateList, s_idx: np.ndarray, t_idx: np.ndarray
) -> np.ndarray:
    """Vectorized |delta M| for index pairs (s_idx, t_idx) into a candidate list."""
    pos = cands.positions
    labels = cands.labels
    a = np.minimum(pos[s_idx], pos[t_idx])  # shallower rank of the pair
    b = np.maximum(pos[s_idx], pos[t_idx])
    if metric == "mrr":
        rel = labels >= 1
        rel_ranks = np.sort(pos[rel])
        fr1 = int(rel_ranks[0]) if len(rel_ranks) else 0  # 0 = none
        fr2 = int(rel_ranks[1]) if len(rel_ranks) > 1 else 0

        def value(p: np.ndarray) -> np.ndarray:
            return np.where((p >= 1) & (p <= k), 1.0 / np.maximum(p, 1), 0.0)

        rel_a = rel[s_idx] & (pos[s_idx] == a) | rel[t_idx] & (pos[t_idx] == a)
        rel_b = rel[s_idx] & (pos[s_idx] == b) | rel[t_idx] & (pos[t_idx] == b)
        # First relevant rank after swapping ranks a < b:
        #   same relevance at both ranks -> unchanged
        #   relevant a moves down to b   -> min(fr2 if a was first else fr1, b)
        #   relevant b moves up to a     -> min(a, fr excluding b)
        fr_before = np.full(len(a), fr1)
        fr_after = fr_before.copy()
        down = rel_a & ~rel_b
        up = ~rel_a & rel_b
        if fr1:
            next_fr = np.where(a == fr1, fr2, fr1)
            fr_after = np.where(
                down, np.where(next_fr > 0, np.minimum(next_fr, b), b), fr_after
            )
            fr_excl_b = np.where(b == fr1, fr2, fr1)
            fr_after = np.where(
                up,
                np.where(fr_excl_b > 0, np.minimum(a, fr_excl_b), a),
                fr_after,
            )
        else:
            fr_after = np.where(up, a, fr_after)
        return np.abs(value(fr_before) - value(fr_after))
    if metric == "ndcg":
        gains = (2.0 ** labels.astype(np.float64)) - 1.0
        ideal = np.sort(gains)[::-1][:k]
        idcg = float((ideal / np.log2(np.arange(2, len(ideal) + 2))).sum())
        if idcg == 0.0:
            return np.zeros(len(a))
        disc_a = np.where(a <= k, 1.0 / np.log2(a + 1.0), 0.0)
        disc_b = np.where(b <= k, 1.0 / np.log2(b + 1.0), 0.0)
        gain_at_a = np.where(pos[s_idx] == a, gains[s_idx], gains[t_idx])
        gain_at_b = np.where(pos[s_idx] == b, gains[s_idx], gains[t_idx])
        return np.abs((gain_at_a - gain_at_b) * (disc_b - disc_a)) / idcg
    raise ValueError(f"unknown swap metric {metric!r}")


def batch_pairwise_loss(
    lists: list[ScoredCandidateList], kind: LossKind
) -> tuple[float, list[np.ndarray]]:
    """Mean pairwise loss over every ordered pair with l_s > l_t, plus score grads.

    Pairs are enumerated within each query's candidate list; the sum is divided
    by the total qualifying pair count across the whole batch. Queries with no
    qualifying pair contribute nothing. Returns (loss, per-list gradient
    arrays aligned with each list's candidates).
    """
    metric, k = "", 0
    if kind.variant == "lambdarank":
        name, _, cutoff = kind.metric.partition("@")
        metric, k = name, int(cutoff)

    total_pairs = 0
    pair_losses: list[np.ndarray] = []
    pair_info: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
    for cands in lists:
        labels = cands.labels
        mask = labels[:, None] > labels[None, :]
        s_idx, t_idx = np.nonzero(mask)
        total_pairs += len(s_idx)
        if len(s_idx) == 0:
            pair_losses.append(np.zeros(0))
            pair_info.append((s_idx, t_idx, np.zeros(0)))
            continue
        diff = cands.scores[t_idx] - cands.scores[s_idx]
        losses = np.maximum(diff, 0.0) + np.log1p(np.exp(-np.abs(diff)))
        if kind.variant == "lambdarank":
            weights = _pair_deltas(metric, k, cands, s_idx, t_idx)
        else:
            weights = np.ones(len(s_idx))
        pair_losses.append(weights * losses)
        pair_info.append((s_idx, t_idx, weights))

    grads = [np.zeros(len(c)) for c in lists]
    if total_pairs == 0:
        return 0.0, grads

    loss = float(sum(pl.sum() for pl in pair_losses)) / total_pairs
    for cands, grad, (s_idx, t_idx, weights) in zip(lists, grads, pair_info):
        if len(s_idx) == 0:
            continue
        sig = _sigmoid(cands.scores[t_idx] - cands.scores[s_idx])
        contrib = weights * sig / total_pairs
        np.add.at(grad, s_idx, -contrib)
        np.add.at(grad, t_idx, contrib)
    return loss, grads
