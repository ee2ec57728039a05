"""BM25 retrieval over an in-memory inverted index.

Scoring uses the non-negative idf variant

    idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5))
    score(d) = sum over unique query terms of
               idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len_d / avgdl))

Query term frequency is ignored (terms are deduplicated); documents with a
zero score are excluded from results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._ranking import rank_all
from .corpus import Document, Query
from .index import SearchResult

DEFAULT_K1 = 0.9
DEFAULT_B = 0.4


@dataclass
class InvertedIndex:
    postings: dict[str, tuple[np.ndarray, np.ndarray]]  # term -> (ordinals, tfs)
    doc_lengths: np.ndarray  # (num_docs,) int64
    avg_doc_length: float
    num_docs: int


def build_lexical_index(documents: Sequence[Document]) -> InvertedIndex:
    """Exact term-frequency postings, sorted ascending by document ordinal."""
    raw: dict[str, list[tuple[int, int]]] = {}
    lengths = np.zeros(len(documents), dtype=np.int64)
    for ordinal, doc in enumerate(documents):
        lengths[ordinal] = len(doc.tokens)
        counts: dict[str, int] = {}
        for tok in doc.tokens:
            counts[tok] = counts.get(tok, 0) + 1
        for term, tf in counts.items():
            raw.setdefault(term, []).append((ordinal, tf))
    postings = {
        term: (
            np.array([o for o, _ in plist], dtype=np.int64),
            np.array([tf for _, tf in plist], dtype=np.float64),
        )
        for term, plist in raw.items()
    }
    avg = float(lengths.mean()) if len(documents) else 0.0
    return InvertedIndex(
        postings=postings,
        doc_lengths=lengths,
        avg_doc_length=avg,
        num_docs=len(documents),
    )


def bm25_idf(num_docs: int, df: int) -> float:
    return math.log(1.0 + (num_docs - df + 0.5) / (df + 0.5))


def bm25_search(
    index: InvertedIndex,
    query: Query | Sequence[str],
    n: int,
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
) -> SearchResult:
    """Top-n BM25 hits; ties break by ascending ordinal, zero scores drop."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    tokens = query.tokens if isinstance(query, Query) else list(query)
    if index.num_docs == 0 or index.avg_doc_length == 0.0:
        # No documents, or only empty ones: nothing can match.
        return SearchResult(
            ordinals=np.empty(0, dtype=np.int64), scores=np.empty(0, dtype=np.float64)
        )

    scores = np.zeros(index.num_docs, dtype=np.float64)
    norm = k1 * (1.0 - b + b * index.doc_lengths / index.avg_doc_length)
    matched = np.zeros(index.num_docs, dtype=bool)
    for term in sorted(set(tokens)):
        posting = index.postings.get(term)
        if posting is None:
            continue
        ords, tfs = posting
        idf = bm25_idf(index.num_docs, len(ords))
        scores[ords] += idf * tfs * (k1 + 1.0) / (tfs + norm[ords])
        matched[ords] = True

    cand = np.nonzero(matched & (scores > 0.0))[0]
    order = rank_all(cand, scores[cand])
    top = cand[order][:n]
    return SearchResult(ordinals=top.astype(np.int64), scores=scores[top])
