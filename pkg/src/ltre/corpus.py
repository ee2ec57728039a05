"""Collections, queries, relevance judgments, and the synthetic benchmark generator.

File formats handled here:
- collection.tsv / queries.tsv: ``doc_id<TAB>text`` per line, UTF-8.
- qrels.txt: TREC format ``query_id 0 doc_id grade`` per line.

The synthetic generator builds a topic-structured corpus with known ground
truth: every topic owns a direction in embedding space, a block of document
vocabulary, and a disjoint block of query-only "synonym" terms that never
occur in any document (so lexical retrieval is provably incomplete while
dense retrieval is not).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .encoder import DocEmbeddingMatrix, TermEmbeddingTable

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric characters. No stemming, no stopwords."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Document:
    doc_id: str
    tokens: list[str]


@dataclass
class Query:
    query_id: str
    tokens: list[str]


@dataclass
class QrelSet:
    """Graded relevance judgments. Pairs absent from ``grades`` mean grade 0.

    Only strictly positive grades are stored; every stored grade is >= 1.
    """

    grades: dict[tuple[str, str], int]
    _by_query: dict[str, dict[str, int]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        by_query: dict[str, dict[str, int]] = {}
        for (qid, did), g in self.grades.items():
            if g < 1:
                raise ValueError(f"stored qrel grade must be >= 1, got {g} for ({qid}, {did})")
            by_query.setdefault(qid, {})[did] = g
        self._by_query = by_query

    def grade(self, query_id: str, doc_id: str) -> int:
        return self.grades.get((query_id, doc_id), 0)

    def docs_for(self, query_id: str) -> dict[str, int]:
        """All judged (grade >= 1) documents for a query, as ``doc_id -> grade``."""
        return dict(self._by_query.get(query_id, {}))

    def query_ids(self) -> list[str]:
        return list(self._by_query.keys())

    def __len__(self) -> int:
        return len(self.grades)


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic benchmark generator.

    ``doc_noise`` / ``query_noise`` scale isotropic Gaussian noise added to the
    topic direction before normalization. ``mismatch_rate`` is the per-token
    probability that a query token is drawn from the topic's synonym block
    instead of its document-vocabulary block.
    """

    num_topics: int
    num_docs: int
    num_train_queries: int
    num_eval_queries: int
    dim_k: int
    doc_noise: float
    query_noise: float
    mismatch_rate: float
    vocab_size: int
    terms_per_doc: int
    terms_per_query: int
    seed: int

    def validate(self) -> None:
        if self.num_topics < 1:
            raise ValueError("num_topics must be >= 1")
        if self.num_topics > self.num_docs:
            raise ValueError(
                f"num_topics ({self.num_topics}) must not exceed num_docs ({self.num_docs})"
            )
        if self.dim_k < 2:
            raise ValueError("dim_k must be >= 2")
        if self.vocab_size < 2 * self.num_topics:
            raise ValueError(
                f"vocab_size ({self.vocab_size}) must be >= 2 * num_topics "
                f"({2 * self.num_topics}): each topic owns a document block and a synonym block"
            )
        if self.doc_noise < 0 or self.query_noise < 0:
            raise ValueError("noise scales must be >= 0")
        if not 0.0 <= self.mismatch_rate <= 1.0:
            raise ValueError(f"mismatch_rate must be in [0, 1], got {self.mismatch_rate}")
        if self.num_train_queries < 0 or self.num_eval_queries < 0:
            raise ValueError("query counts must be >= 0")
        if self.terms_per_doc < 1 or self.terms_per_query < 1:
            raise ValueError("terms_per_doc and terms_per_query must be >= 1")


@dataclass
class CorpusBundle:
    """Everything a training or evaluation run needs, in one place."""

    documents: list[Document]
    train_queries: list[Query]
    eval_queries: list[Query]
    qrels: QrelSet
    doc_embeddings: DocEmbeddingMatrix
    term_table: TermEmbeddingTable


def _iter_nonempty_lines(path: str | Path) -> Iterator[tuple[int, str]]:
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            yield line_no, line


def load_collection(path: str | Path) -> list[Document]:
    """Load ``doc_id<TAB>text`` lines. Duplicate doc_ids are an error."""
    docs: list[Document] = []
    seen: set[str] = set()
    for line_no, line in _iter_nonempty_lines(path):
        if "\t" not in line:
            raise ValueError(f"{path}:{line_no}: expected 'doc_id<TAB>text', got: {line!r}")
        doc_id, text = line.split("\t", 1)
        if not doc_id:
            raise ValueError(f"{path}:{line_no}: empty doc_id")
        if doc_id in seen:
            raise ValueError(f"{path}:{line_no}: duplicate doc_id {doc_id!r}")
        seen.add(doc_id)
        docs.append(Document(doc_id=doc_id, tokens=tokenize(text)))
    return docs


def load_queries(path: str | Path) -> list[Query]:
    """Load ``query_id<TAB>text`` lines (same shape as a collection file)."""
    queries: list[Query] = []
    seen: set[str] = set()
    for line_no, line in _iter_nonempty_lines(path):
        if "\t" not in line:
            raise ValueError(f"{path}:{line_no}: expected 'query_id<TAB>text', got: {line!r}")
        qid, text = line.split("\t", 1)
        if not qid:
            raise ValueError(f"{path}:{line_no}: empty query_id")
        if qid in seen:
            raise ValueError(f"{path}:{line_no}: duplicate query_id {qid!r}")
        seen.add(qid)
        queries.append(Query(query_id=qid, tokens=tokenize(text)))
    return queries


def load_qrels(path: str | Path) -> QrelSet:
    """Load TREC qrels. Grade-0 lines are skipped; negative grades are an error."""
    grades: dict[tuple[str, str], int] = {}
    for line_no, line in _iter_nonempty_lines(path):
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(
                f"{path}:{line_no}: expected 'query_id 0 doc_id grade', got {len(parts)} fields"
            )
        qid, _, did, grade_str = parts
        try:
            grade = int(grade_str)
        except ValueError as e:
            raise ValueError(f"{path}:{line_no}: non-integer grade {grade_str!r}") from e
        if grade < 0:
            raise ValueError(f"{path}:{line_no}: negative grade {grade}")
        if grade == 0:
            continue
        grades[(qid, did)] = grade
    return QrelSet(grades=grades)


def save_collection(docs: Iterable[Document], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for d in docs:
            f.write(f"{d.doc_id}\t{' '.join(d.tokens)}\n")


def save_queries(queries: Iterable[Query], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for q in queries:
            f.write(f"{q.query_id}\t{' '.join(q.tokens)}\n")


def save_qrels(qrels: QrelSet, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for (qid, did), g in sorted(qrels.grades.items()):
            f.write(f"{qid} 0 {did} {g}\n")


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return m / norms


def _zipf_weights(n: int) -> np.ndarray:
    # Exponent-1 Zipf over a finite support: p(rank r) proportional to 1/r.
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64)
    return w / w.sum()


def generate_synthetic(spec: SyntheticSpec) -> CorpusBundle:
    """Generate a seeded synthetic corpus with ground-truth relevance.

    Construction, in a fixed draw order so equal specs give bit-identical output:

    1. Each topic gets a unit direction (normalized Gaussian) in R^dim_k.
    2. The term-embedding table is a fixed Gaussian matrix, one row per term.
    3. Document i belongs to topic ``i % num_topics`` and is embedded at
       ``normalize(u_topic + doc_noise * g_i)``; its tokens are Zipf(1.0) draws
       from the topic's document-vocabulary block.
    4. Each query has one source topic. Tokens come from the terms of that
       topic actually observed in documents, except a ``mismatch_rate``
       fraction drawn from the topic's synonym block, which never occurs in
       any document. A hidden query embedding ``normalize(u_topic +
       query_noise * h)`` decides ground truth only.
    5. Qrels: the same-topic document nearest to the hidden query embedding
       (by inner product, ties to the lowest ordinal) gets grade 2; all other
       same-topic documents get grade 1.

    Embedding values are snapped to float32 so the on-disk format
    round-trips bit-exactly.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    T, N, k = spec.num_topics, spec.num_docs, spec.dim_k

    topic_dirs = _normalize_rows(rng.standard_normal((T, k)))

    term_vectors = rng.standard_normal((spec.vocab_size, k))
    term_vectors = term_vectors.astype(np.float32).astype(np.float64)
    terms = [f"t{i:05d}" for i in range(spec.vocab_size)]
    block = spec.vocab_size // (2 * T)

    doc_topics = np.arange(N, dtype=np.int64) % T
    doc_emb = topic_dirs[doc_topics] + spec.doc_noise * rng.standard_normal((N, k))
    doc_emb = _normalize_rows(doc_emb).astype(np.float32).astype(np.float64)

    zipf = _zipf_weights(block)
    doc_local = rng.choice(block, size=(N, spec.terms_per_doc), p=zipf)
    doc_term_rows = doc_topics[:, None] * block + doc_local
    documents = [
        Document(doc_id=f"d{i:05d}", tokens=[terms[r] for r in doc_term_rows[i]])
        for i in range(N)
    ]

    # Terms a query may legitimately share with its topic's documents: only
    # those observed in at least one document, so mismatch_rate=0 guarantees
    # full lexical coverage.
    observed_local: list[np.ndarray] = []
    observed_weights: list[np.ndarray] = []
    for t in range(T):
        local_terms = np.unique(doc_local[doc_topics == t])
        w = zipf[local_terms]
        observed_local.append(local_terms)
        observed_weights.append(w / w.sum())

    same_topic_ordinals = [np.arange(t, N, T, dtype=np.int64) for t in range(T)]

    grades: dict[tuple[str, str], int] = {}

    def make_queries(count: int, prefix: str) -> list[Query]:
        queries: list[Query] = []
        for qi in range(count):
            t = int(rng.integers(0, T))
            q_emb = topic_dirs[t] + spec.query_noise * rng.standard_normal(k)
            q_emb = q_emb / max(np.linalg.norm(q_emb), 1e-30)
            use_synonym = rng.random(spec.terms_per_query) < spec.mismatch_rate
            n_syn = int(use_synonym.sum())
            n_doc = spec.terms_per_query - n_syn
            token_rows = np.empty(spec.terms_per_query, dtype=np.int64)
            if n_doc:
                drawn = rng.choice(observed_local[t], size=n_doc, p=observed_weights[t])
                token_rows[~use_synonym] = t * block + drawn
            if n_syn:
                drawn = rng.choice(block, size=n_syn, p=zipf)
                token_rows[use_synonym] = (T + t) * block + drawn
            qid = f"{prefix}{qi:05d}"
            queries.append(Query(query_id=qid, tokens=[terms[r] for r in token_rows]))

            topic_docs = same_topic_ordinals[t]
            scores = doc_emb[topic_docs] @ q_emb
            best = topic_docs[int(np.argmax(scores))]
            for ordinal in topic_docs:
                grades[(qid, f"d{ordinal:05d}")] = 2 if ordinal == best else 1
        return queries

    train_queries = make_queries(spec.num_train_queries, "q")
    eval_queries = make_queries(spec.num_eval_queries, "e")

    doc_ids = [d.doc_id for d in documents]
    return CorpusBundle(
        documents=documents,
        train_queries=train_queries,
        eval_queries=eval_queries,
        qrels=QrelSet(grades=grades),
        doc_embeddings=DocEmbeddingMatrix(rows=doc_emb, doc_ids=doc_ids),
        term_table=TermEmbeddingTable(vectors=term_vectors, terms=terms),
    )
