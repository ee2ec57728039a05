"""Ranking-quality metrics, overlap diagnostics, and TREC run files.

Metric conventions: NDCG uses gains 2^grade - 1 with discounts
1/log2(rank + 1), normalized by the ideal ranking of *all* judged documents
(cut at k). Recall and MRR treat grade >= rel_threshold as relevant. Queries
that cannot be scored (no relevant documents, or zero ideal DCG) are excluded
from set-level means with a warning.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .corpus import QrelSet

log = logging.getLogger(__name__)


@dataclass
class RunRanking:
    """Per-query ranked doc_ids with scores, descending, no duplicates."""

    entries: dict[str, list[tuple[str, float]]]

    def __post_init__(self) -> None:
        for qid, ranked in self.entries.items():
            ids = [d for d, _ in ranked]
            if len(set(ids)) != len(ids):
                raise ValueError(f"duplicate doc_ids in ranking for query {qid!r}")

    def doc_ids(self, qid: str) -> list[str]:
        return [d for d, _ in self.entries.get(qid, [])]

    def query_ids(self) -> list[str]:
        return list(self.entries.keys())


def _grades_for(qrels: QrelSet | Mapping[str, int], qid: str) -> Mapping[str, int]:
    if isinstance(qrels, QrelSet):
        return qrels.docs_for(qid)
    return qrels


def mrr_single(
    ranked_doc_ids: Sequence[str],
    grades: Mapping[str, int],
    k: int = 10,
    rel_threshold: int = 1,
) -> float:
    for rank, did in enumerate(ranked_doc_ids[:k], start=1):
        if grades.get(did, 0) >= rel_threshold:
            return 1.0 / rank
    return 0.0


def recall_single(
    ranked_doc_ids: Sequence[str],
    grades: Mapping[str, int],
    k: int,
    rel_threshold: int = 1,
) -> float:
    relevant = {d for d, g in grades.items() if g >= rel_threshold}
    if not relevant:
        raise ValueError("recall undefined for a query with no relevant documents")
    hits = sum(1 for did in ranked_doc_ids[:k] if did in relevant)
    return hits / len(relevant)


def ndcg_single(
    ranked_doc_ids: Sequence[str], grades: Mapping[str, int], k: int = 10
) -> float:
    ideal_gains = sorted(((2**g - 1) for g in grades.values()), reverse=True)[:k]
    idcg = sum(g / math.log2(r + 1) for r, g in enumerate(ideal_gains, start=1))
    if idcg == 0.0:
        raise ValueError("ndcg undefined for a query with zero ideal DCG")
    dcg = sum(
        (2 ** grades.get(did, 0) - 1) / math.log2(rank + 1)
        for rank, did in enumerate(ranked_doc_ids[:k], start=1)
    )
    return dcg / idcg


def _set_mean(run: RunRanking, qrels: QrelSet, fn, what: str) -> float:
    values = []
    for qid in run.query_ids():
        try:
            values.append(fn(run.doc_ids(qid), qrels.docs_for(qid)))
        except ValueError:
            log.warning("query %s excluded from %s: not scorable", qid, what)
    return sum(values) / len(values) if values else 0.0


def mrr_at_k(run: RunRanking, qrels: QrelSet, k: int = 10, rel_threshold: int = 1) -> float:
    return _set_mean(
        run, qrels, lambda ids, g: _scored_mrr(ids, g, k, rel_threshold), f"mrr@{k}"
    )


def _scored_mrr(ids, grades, k, rel_threshold):
    if not any(g >= rel_threshold for g in grades.values()):
        raise ValueError("no relevant documents")
    return mrr_single(ids, grades, k, rel_threshold)


def recall_at_k(run: RunRanking, qrels: QrelSet, k: int, rel_threshold: int = 1) -> float:
    return _set_mean(
        run, qrels, lambda ids, g: recall_single(ids, g, k, rel_threshold), f"recall@{k}"
    )


def ndcg_at_k(run: RunRanking, qrels: QrelSet, k: int = 10) -> float:
    return _set_mean(run, qrels, lambda ids, g: ndcg_single(ids, g, k), f"ndcg@{k}")


def overlap_at_k(a: Sequence, b: Sequence, k: int) -> float:
    """|top-k(a) intersect top-k(b)| / k. Always divides by k, even for short lists."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return len(set(list(a)[:k]) & set(list(b)[:k])) / k


@dataclass
class MetricsReport:
    mrr_at_10: float
    recall_at_k: dict[int, float]
    ndcg_at_10: float
    per_query: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "mrr_at_10": self.mrr_at_10,
                "recall_at_k": {str(k): v for k, v in self.recall_at_k.items()},
                "ndcg_at_10": self.ndcg_at_10,
                "per_query": self.per_query,
            },
            indent=2,
            sort_keys=True,
        )

    def to_csv_line(self) -> str:
        recalls = ",".join(f"{v!r}" for _, v in sorted(self.recall_at_k.items()))
        return f"{self.mrr_at_10!r},{recalls},{self.ndcg_at_10!r}"

    def csv_header(self) -> str:
        recalls = ",".join(f"recall_at_{k}" for k in sorted(self.recall_at_k))
        return f"mrr_at_10,{recalls},ndcg_at_10"


def evaluate_run(
    run: RunRanking,
    qrels: QrelSet,
    recall_ks: Sequence[int] = (200,),
    rel_threshold: int = 1,
) -> MetricsReport:
    """Full evaluation of a run, keeping per-query values."""
    per_query: dict[str, dict[str, float]] = {}
    for qid in run.query_ids():
        grades = qrels.docs_for(qid)
        ids = run.doc_ids(qid)
        row: dict[str, float] = {}
        if any(g >= rel_threshold for g in grades.values()):
            row["mrr_at_10"] = mrr_single(ids, grades, 10, rel_threshold)
            for k in recall_ks:
                row[f"recall_at_{k}"] = recall_single(ids, grades, k, rel_threshold)
        else:
            log.warning("query %s has no relevant documents; excluded", qid)
        try:
            row["ndcg_at_10"] = ndcg_single(ids, grades, 10)
        except ValueError:
            pass
        per_query[qid] = row

    def mean(key: str) -> float:
        vals = [r[key] for r in per_query.values() if key in r]
        return sum(vals) / len(vals) if vals else 0.0

    return MetricsReport(
        mrr_at_10=mean("mrr_at_10"),
        recall_at_k={k: mean(f"recall_at_{k}") for k in recall_ks},
        ndcg_at_10=mean("ndcg_at_10"),
        per_query=per_query,
    )


def write_run(run: RunRanking, path: str | Path, tag: str = "ltre") -> None:
    """TREC run format: ``qid Q0 docid rank score tag``."""
    with open(path, "w", encoding="utf-8") as f:
        for qid, ranked in run.entries.items():
            for rank, (did, score) in enumerate(ranked, start=1):
                f.write(f"{qid} Q0 {did} {rank} {score!r} {tag}\n")


def read_run(path: str | Path) -> RunRanking:
    """Read a TREC run. File order is preserved; a rank field that disagrees
    with the file order only logs a warning."""
    entries: dict[str, list[tuple[str, float]]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ValueError(f"{path}:{line_no}: expected 6 fields, got {len(parts)}")
            qid, _, did, rank_str, score_str, _ = parts
            try:
                rank = int(rank_str)
                score = float(score_str)
            except ValueError as e:
                raise ValueError(f"{path}:{line_no}: bad rank/score") from e
            ranked = entries.setdefault(qid, [])
            if rank != len(ranked) + 1:
                log.warning(
                    "%s:%d: rank field %d disagrees with file order %d; keeping file order",
                    path,
                    line_no,
                    rank,
                    len(ranked) + 1,
                )
            ranked.append((did, score))
    return RunRanking(entries=entries)
