"""Training loops: full-retrieval training plus negative-sampling baselines.

The full-retrieval strategy ("ltre") performs a real top-n search over the
fixed document index at every step, guarantees at least one relevant
candidate by injection, recomputes candidate scores as exact inner products
against the fixed document embeddings, and backpropagates the pairwise loss
into the query encoder only. Baseline strategies replace the retrieval with
different candidate samplers but share the same loss and update path.

Per-step diagnostics (computed before the parameter update, from the actual
retrieved top-200 of the current batch): batch MRR@10, batch Recall@200,
overlap@200 against the lexical retriever, and overlap@200 between
asynchronously cached and real-time retrieval.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import CorpusBundle, QrelSet, Query
from .encoder import (
    DocEmbeddingMatrix,
    OptimizerState,
    QueryEncoderParams,
    TermEmbeddingTable,
    adamw_step,
    effective_lr,
    encode_batch,
    encode_batch_backward,
    extract_query_features,
)
from .index import FlatIndex, PQIndex, SearchResult, search
from .lexical import DEFAULT_B, DEFAULT_K1, InvertedIndex, bm25_search, build_lexical_index
from .loss import LossKind, ScoredCandidateList, batch_pairwise_loss
from .metrics import MetricsReport, RunRanking, evaluate_run

log = logging.getLogger(__name__)

STRATEGY_KINDS = ("ltre", "rand-neg", "lexical-neg", "in-batch-neg", "nce-neg", "async-ann")

LOG_HEADER = "step,loss,lr,batch_mrr10,batch_recall200,overlap_lexical200,overlap_async200"


@dataclass
class Strategy:
    kind: str
    refresh_every: int = 500  # async-ann only

    def __post_init__(self) -> None:
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {STRATEGY_KINDS}")
        if self.refresh_every < 1:
            raise ValueError("refresh_every must be >= 1")


@dataclass
class TrainConfig:
    strategy: Strategy
    steps: int
    batch_size: int = 32
    depth_n: int = 100
    loss: LossKind = field(default_factory=lambda: LossKind("ranknet"))
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    warmup_steps: int = 200
    total_steps: int | None = None  # defaults to steps
    dropout_p: float = 0.1
    use_layer_norm: bool = True
    init_noise: float = 0.02
    diag_depth: int = 200
    async_diag_refresh: int = 500  # shadow-cache refresh for non-async strategies
    bm25_k1: float = DEFAULT_K1
    bm25_b: float = DEFAULT_B
    rel_threshold: int = 1
    threads: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.depth_n < 2:
            raise ValueError("depth_n must be >= 2")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.async_diag_refresh < 1:
            raise ValueError("async_diag_refresh must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        total = self.total_steps if self.total_steps is not None else max(self.steps, 1)
        if self.warmup_steps >= total:
            raise ValueError(
                f"warmup_steps ({self.warmup_steps}) must be < total steps ({total})"
            )


@dataclass
class StepRecord:
    step: int
    loss: float
    lr: float
    batch_mrr10: float
    batch_recall200: float
    overlap_lexical200: float
    overlap_async200: float


@dataclass
class TrainingLog:
    records: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(LOG_HEADER + "\n")
            for r in self.records:
                f.write(
                    f"{r.step},{r.loss!r},{r.lr!r},{r.batch_mrr10!r},"
                    f"{r.batch_recall200!r},{r.overlap_lexical200!r},{r.overlap_async200!r}\n"
                )

    @classmethod
    def read_csv(cls, path: str | Path) -> "TrainingLog":
        records = []
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().strip()
            if header != LOG_HEADER:
                raise ValueError(f"{path}: unexpected header {header!r}")
            for line in f:
                parts = line.strip().split(",")
                records.append(
                    StepRecord(
                        step=int(parts[0]),
                        loss=float(parts[1]),
                        lr=float(parts[2]),
                        batch_mrr10=float(parts[3]),
                        batch_recall200=float(parts[4]),
                        overlap_lexical200=float(parts[5]),
                        overlap_async200=float(parts[6]),
                    )
                )
        return cls(records=records)


@dataclass
class TrainResult:
    params: QueryEncoderParams
    opt_state: OptimizerState
    log: TrainingLog
    lists_checked: int = 0
    injections: int = 0


@dataclass
class StepOutcome:
    """Result of a single standalone training step."""

    loss: float
    lr: float
    lists: list[ScoredCandidateList]


# ---------------------------------------------------------------------------
# Reusable per-corpus precomputation
# ---------------------------------------------------------------------------


@dataclass
class TrainerStatics:
    """Expensive per-corpus tables that do not depend on model parameters."""

    features_train: np.ndarray  # (Q, k)
    features_eval: np.ndarray  # (E, k)
    grades: np.ndarray  # (Q, N) int16, grade of each doc for each train query
    rel_ordinals: list[np.ndarray]  # per train query, sorted by (-grade, doc_id)
    n_relevant: np.ndarray  # (Q,)
    lexical_top: np.ndarray  # (Q, lexical_depth) int64, -1 padded
    lexical_depth: int
    lexical_index: InvertedIndex

    @classmethod
    def build(
        cls,
        bundle: CorpusBundle,
        lexical_depth: int = 200,
        k1: float = DEFAULT_K1,
        b: float = DEFAULT_B,
    ) -> "TrainerStatics":
        table = bundle.term_table
        feat_train = np.stack(
            [extract_query_features(q, table) for q in bundle.train_queries]
        ) if bundle.train_queries else np.zeros((0, table.vectors.shape[1]))
        feat_eval = np.stack(
            [extract_query_features(q, table) for q in bundle.eval_queries]
        ) if bundle.eval_queries else np.zeros((0, table.vectors.shape[1]))

        matrix = bundle.doc_embeddings
        Q, N = len(bundle.train_queries), matrix.num_docs
        grades = np.zeros((Q, N), dtype=np.int16)
        rel_ordinals: list[np.ndarray] = []
        for qi, q in enumerate(bundle.train_queries):
            docs = bundle.qrels.docs_for(q.query_id)
            ranked = sorted(docs.items(), key=lambda kv: (-kv[1], kv[0]))
            ords = np.array(
                [matrix.ordinal_of[d] for d, _ in ranked if d in matrix.ordinal_of],
                dtype=np.int64,
            )
            rel_ordinals.append(ords)
            for did, g in docs.items():
                o = matrix.ordinal_of.get(did)
                if o is not None:
                    grades[qi, o] = g

        lex = build_lexical_index(bundle.documents)
        lex_top = np.full((Q, lexical_depth), -1, dtype=np.int64)
        for qi, q in enumerate(bundle.train_queries):
            hits = bm25_search(lex, q, lexical_depth, k1=k1, b=b)
            lex_top[qi, : len(hits)] = hits.ordinals

        return cls(
            features_train=feat_train,
            features_eval=feat_eval,
            grades=grades,
            rel_ordinals=rel_ordinals,
            n_relevant=np.array([len(r) for r in rel_ordinals], dtype=np.int64),
            lexical_top=lex_top,
            lexical_depth=lexical_depth,
            lexical_index=lex,
        )


# ---------------------------------------------------------------------------
# Candidate construction
# ---------------------------------------------------------------------------


def _exact_scores(doc_rows: np.ndarray, ordinals: np.ndarray, emb: np.ndarray) -> np.ndarray:
    return doc_rows[ordinals] @ emb


def _inject(
    cands: ScoredCandidateList,
    rel_ordinals: np.ndarray,
    rel_grades: np.ndarray,
    doc_rows: np.ndarray,
    emb: np.ndarray,
) -> tuple[ScoredCandidateList, bool]:
    """Replace the last candidate with the top relevant doc if none is present."""
    if len(cands) == 0:
        raise ValueError("cannot inject into an empty candidate list")
    if (cands.labels >= 1).any():
        return cands, False
    if len(rel_ordinals) == 0:
        raise ValueError("query has no relevant document to inject")
    ordinal = int(rel_ordinals[0])
    ordinals = cands.ordinals.copy()
    scores = cands.scores.copy()
    labels = cands.labels.copy()
    ordinals[-1] = ordinal
    scores[-1] = float(doc_rows[ordinal] @ emb)
    labels[-1] = int(rel_grades[0])
    return (
        ScoredCandidateList(
            ordinals=ordinals, scores=scores, labels=labels, positions=cands.positions.copy()
        ),
        True,
    )


def inject_relevant(
    cands: ScoredCandidateList,
    qrels: QrelSet,
    query_id: str,
    doc_embeddings: DocEmbeddingMatrix,
    query_embedding: np.ndarray,
) -> ScoredCandidateList:
    """If every candidate is labeled irrelevant, replace the last one with the
    highest-grade relevant document (ties to the lowest doc_id), carrying its
    true label, its real inner-product score, and the last rank position."""
    docs = qrels.docs_for(query_id)
    if not docs:
        raise ValueError(f"query {query_id!r} has no relevant document in the qrels")
    ranked = sorted(docs.items(), key=lambda kv: (-kv[1], kv[0]))
    rel_ords = np.array([doc_embeddings.ordinal_of[d] for d, _ in ranked], dtype=np.int64)
    rel_grades = np.array([g for _, g in ranked], dtype=np.int64)
    out, _ = _inject(cands, rel_ords, rel_grades, doc_embeddings.rows, query_embedding)
    return out


def _included_relevant(rel: np.ndarray, n: int, reserve: int = 0) -> np.ndarray:
    """Relevant docs included in a sampled list: all of them when they fit
    within ``n - reserve``, otherwise the top half of the list budget in
    (-grade, doc_id) order."""
    budget = n - reserve
    if len(rel) <= budget:
        return rel
    return rel[: max(1, n // 2)]


def _ranked_list(
    ordinals: np.ndarray,
    grade_row: np.ndarray,
    doc_rows: np.ndarray,
    emb: np.ndarray,
) -> ScoredCandidateList:
    """Score, order by (score desc, ordinal asc), and attach 1-based positions."""
    scores = _exact_scores(doc_rows, ordinals, emb)
    order = np.lexsort((ordinals, -scores))
    ordinals = ordinals[order]
    return ScoredCandidateList.from_ranked(
        ordinals=ordinals, scores=scores[order], labels=grade_row[ordinals]
    )


def _sample_uniform_negatives(
    grade_row: np.ndarray, need: int, rng: np.random.Generator
) -> np.ndarray:
    """Uniform corpus samples excluding relevant docs, without replacement."""
    N = len(grade_row)
    pool_size = int((grade_row == 0).sum())
    need = min(need, pool_size)
    if need == 0:
        return np.empty(0, dtype=np.int64)
    chosen: list[int] = []
    seen = np.zeros(N, dtype=bool)
    while len(chosen) < need:
        draw = rng.integers(0, N, size=2 * (need - len(chosen)))
        for d in draw:
            if not seen[d] and grade_row[d] == 0:
                seen[d] = True
                chosen.append(int(d))
                if len(chosen) == need:
                    break
    return np.array(chosen, dtype=np.int64)


def sample_candidates(
    strategy: Strategy,
    queries: Sequence[Query],
    query_embeddings: np.ndarray,
    qrels: QrelSet,
    doc_embeddings: DocEmbeddingMatrix,
    rng: np.random.Generator,
    step: int = 0,
    depth_n: int = 100,
    lexical_index: InvertedIndex | None = None,
    cached_ordinals: list[np.ndarray] | None = None,
    bm25_k1: float = DEFAULT_K1,
    bm25_b: float = DEFAULT_B,
) -> list[ScoredCandidateList]:
    """Build per-query candidate lists for a negative-sampling strategy.

    rand-neg:     uniform non-relevant samples fill the list next to the
                  query's relevant docs.
    lexical-neg:  lexical top-n docs (relevant removed) as negatives, plus the
                  relevant docs.
    in-batch-neg: other in-batch queries' included relevant docs as negatives
                  (round-robin, deduplicated), plus own relevant docs.
    nce-neg:      the single highest-scored in-batch negative plus own
                  relevant docs.
    async-ann:    the cached top-n lists retrieved with stale parameters
                  (``cached_ordinals``), relevant doc injected when absent.

    All lists are deduplicated, scored with the current query embeddings, and
    carry labels from the qrels.
    """
    matrix = doc_embeddings
    N = matrix.num_docs
    B = len(queries)
    grade_rows = np.zeros((B, N), dtype=np.int16)
    rel_ords: list[np.ndarray] = []
    rel_grades: list[np.ndarray] = []
    for i, q in enumerate(queries):
        docs = qrels.docs_for(q.query_id)
        ranked = sorted(docs.items(), key=lambda kv: (-kv[1], kv[0]))
        rel_ords.append(np.array([matrix.ordinal_of[d] for d, _ in ranked], dtype=np.int64))
        rel_grades.append(np.array([g for _, g in ranked], dtype=np.int64))
        for did, g in docs.items():
            grade_rows[i, matrix.ordinal_of[did]] = g

    lex_rows: list[np.ndarray] | None = None
    if strategy.kind == "lexical-neg":
        if lexical_index is None:
            raise ValueError("lexical-neg requires a lexical index")
        lex_rows = [
            bm25_search(lexical_index, q, depth_n, k1=bm25_k1, b=bm25_b).ordinals
            for q in queries
        ]

    return _sample_lists(
        strategy,
        query_embeddings,
        matrix.rows,
        grade_rows,
        rel_ords,
        rel_grades,
        rng,
        depth_n,
        lex_rows=lex_rows,
        cached_rows=cached_ordinals,
    )


def _sample_lists(
    strategy: Strategy,
    emb: np.ndarray,
    doc_rows: np.ndarray,
    grade_rows: np.ndarray,
    rel_ords: list[np.ndarray],
    rel_grades: list[np.ndarray],
    rng: np.random.Generator,
    n: int,
    lex_rows: list[np.ndarray] | None = None,
    cached_rows: list[np.ndarray] | None = None,
) -> list[ScoredCandidateList]:
    B = emb.shape[0]
    kind = strategy.kind
    lists: list[ScoredCandidateList] = []

    if kind == "async-ann":
        if cached_rows is None:
            raise ValueError("async-ann requires cached candidate lists")
        for i in range(B):
            ords = cached_rows[i][:n]
            ords = ords[ords >= 0]
            scores = _exact_scores(doc_rows, ords, emb[i])
            cands = ScoredCandidateList.from_ranked(
                ordinals=ords, scores=scores, labels=grade_rows[i][ords]
            )
            cands, _ = _inject(cands, rel_ords[i], rel_grades[i], doc_rows, emb[i])
            lists.append(cands)
        return lists

    included = [
        _included_relevant(rel_ords[i], n, reserve=1 if kind == "nce-neg" else 0)
        for i in range(B)
    ]

    for i in range(B):
        inc = included[i]
        budget = n - len(inc)
        if kind == "rand-neg":
            negs = _sample_uniform_negatives(grade_rows[i], budget, rng)
        elif kind == "lexical-neg":
            assert lex_rows is not None
            pool = lex_rows[i]
            pool = pool[grade_rows[i][pool] == 0]
            negs = pool[:budget]
        elif kind == "in-batch-neg":
            negs = _round_robin_pool(included, i, grade_rows[i], budget)
        elif kind == "nce-neg":
            pool = np.unique(np.concatenate([included[j] for j in range(B) if j != i]))\
                if B > 1 else np.empty(0, dtype=np.int64)
            pool = pool[grade_rows[i][pool] == 0] if len(pool) else pool
            if len(pool):
                pool_scores = _exact_scores(doc_rows, pool, emb[i])
                negs = pool[[int(np.argmax(pool_scores))]]
            else:
                negs = np.empty(0, dtype=np.int64)
        else:
            raise ValueError(f"sample_candidates does not handle strategy {kind!r}")
        ords = np.concatenate([inc, negs]).astype(np.int64)
        lists.append(_ranked_list(ords, grade_rows[i], doc_rows, emb[i]))
    return lists


def _round_robin_pool(
    included: list[np.ndarray], i: int, grade_row: np.ndarray, budget: int
) -> np.ndarray:
    """Interleave other queries' included relevant docs, skipping docs relevant
    to query i and duplicates, until the budget is filled."""
    if budget <= 0:
        return np.empty(0, dtype=np.int64)
    out: list[int] = []
    seen: set[int] = set()
    longest = max((len(arr) for j, arr in enumerate(included) if j != i), default=0)
    for r in range(longest):
        for j, arr in enumerate(included):
            if j == i or r >= len(arr):
                continue
            o = int(arr[r])
            if o in seen or grade_row[o] != 0:
                continue
            seen.add(o)
            out.append(o)
            if len(out) == budget:
                return np.array(out, dtype=np.int64)
    return np.array(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# Single training step (full-retrieval strategy)
# ---------------------------------------------------------------------------


def _apply_update(
    params: QueryEncoderParams,
    opt_state: OptimizerState,
    cache,
    lists: list[ScoredCandidateList],
    doc_rows: np.ndarray,
    emb: np.ndarray,
    loss_kind: LossKind,
) -> tuple[float, float]:
    """Loss -> score grads -> embedding grads -> encoder grads -> optimizer."""
    loss, score_grads = batch_pairwise_loss(lists, loss_kind)
    if not np.isfinite(loss):
        raise ValueError(f"non-finite loss {loss!r}; halting the run")
    d_emb = np.zeros_like(emb)
    for i, (cands, g) in enumerate(zip(lists, score_grads)):
        if len(cands) and np.any(g):
            d_emb[i] = g @ doc_rows[cands.ordinals]
    grads = encode_batch_backward(params, cache, d_emb)
    lr_used = effective_lr(opt_state, opt_state.step_count + 1)
    adamw_step(opt_state, params, grads)
    return loss, lr_used


def ltre_train_step(
    queries: Sequence[Query],
    term_table: TermEmbeddingTable,
    params: QueryEncoderParams,
    opt_state: OptimizerState,
    index: FlatIndex | PQIndex,
    doc_embeddings: DocEmbeddingMatrix,
    qrels: QrelSet,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[QueryEncoderParams, OptimizerState, StepOutcome]:
    """One full-retrieval training step over a query batch.

    Encode (train mode) -> top-n search on the configured index -> inject a
    relevant doc where needed -> exact inner-product rescoring against the
    fixed document matrix -> pairwise loss -> backprop through the query
    encoder -> optimizer update. Document embeddings and index bytes are never
    touched.
    """
    features = np.stack([extract_query_features(q, term_table) for q in queries])
    emb, cache = encode_batch(params, features, "train", rng)
    results = search(index, emb, cfg.depth_n, cfg.threads)
    doc_rows = doc_embeddings.rows
    lists = []
    for q, e, res in zip(queries, emb, results):
        ords = res.ordinals
        scores = _exact_scores(doc_rows, ords, e)
        labels = np.array(
            [qrels.grade(q.query_id, doc_embeddings.doc_ids[o]) for o in ords],
            dtype=np.int64,
        )
        cands = ScoredCandidateList.from_ranked(ordinals=ords, scores=scores, labels=labels)
        cands = inject_relevant(cands, qrels, q.query_id, doc_embeddings, e)
        lists.append(cands)
    loss, lr_used = _apply_update(params, opt_state, cache, lists, doc_rows, emb, cfg.loss)
    return params, opt_state, StepOutcome(loss=loss, lr=lr_used, lists=lists)


# ---------------------------------------------------------------------------
# Full training loop with diagnostics
# ---------------------------------------------------------------------------


def _build_schedule(
    num_queries: int, steps: int, batch_size: int, rng: np.random.Generator
) -> np.ndarray:
    """(steps, batch_size) query indices: shuffled epochs, cycled as needed."""
    total = steps * batch_size
    if total == 0:
        return np.zeros((0, batch_size), dtype=np.int64)
    chunks = []
    have = 0
    while have < total:
        chunks.append(rng.permutation(num_queries))
        have += num_queries
    return np.concatenate(chunks)[:total].reshape(steps, batch_size)


def _overlap_rows(top: np.ndarray, row: np.ndarray, k: int) -> float:
    valid = row[row >= 0][:k]
    if len(valid) == 0:
        return 0.0
    return len(np.intersect1d(top[:k], valid)) / k


def train_loop(
    cfg: TrainConfig,
    bundle: CorpusBundle,
    index: FlatIndex | PQIndex | None = None,
    init_params: QueryEncoderParams | None = None,
    statics: TrainerStatics | None = None,
    on_step: Callable[[int, list[ScoredCandidateList], list[SearchResult]], None] | None = None,
) -> TrainResult:
    """Run ``cfg.steps`` training steps and return final parameters plus the log.

    Training queries are cycled in seeded shuffled order. Everything is
    deterministic given the config (seed included), independent of the thread
    count used for retrieval.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    matrix = bundle.doc_embeddings
    k = matrix.dim

    if init_params is not None:
        params = init_params.copy()
        params.dropout_p = cfg.dropout_p
    else:
        params = QueryEncoderParams.initial(
            k,
            rng=rng,
            init_noise=cfg.init_noise,
            use_layer_norm=cfg.use_layer_norm,
            dropout_p=cfg.dropout_p,
        )
    total = cfg.total_steps if cfg.total_steps is not None else max(cfg.steps, 1)
    opt = OptimizerState.fresh(
        params,
        lr=cfg.lr,
        warmup_steps=cfg.warmup_steps,
        total_steps=total,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        weight_decay=cfg.weight_decay,
    )
    if index is None:
        index = FlatIndex(matrix)

    lexical_depth = max(cfg.diag_depth, cfg.depth_n)
    if statics is None or statics.lexical_depth < lexical_depth:
        statics = TrainerStatics.build(
            bundle, lexical_depth=lexical_depth, k1=cfg.bm25_k1, b=cfg.bm25_b
        )

    num_train = len(bundle.train_queries)
    if num_train == 0 and cfg.steps > 0:
        raise ValueError("cannot train without training queries")
    schedule = _build_schedule(num_train, cfg.steps, cfg.batch_size, rng)

    doc_rows = matrix.rows
    depth = max(cfg.depth_n, cfg.diag_depth)
    cache_depth = min(depth, matrix.num_docs)
    async_cache = np.full((num_train, cache_depth), -1, dtype=np.int64)
    refresh_every = (
        cfg.strategy.refresh_every if cfg.strategy.kind == "async-ann" else cfg.async_diag_refresh
    )

    def refresh_cache(step: int) -> None:
        flat = schedule[step : step + refresh_every].reshape(-1)
        pool = np.unique(flat)
        emb_pool, _ = encode_batch(params, statics.features_train[pool], "eval")
        results = search(index, emb_pool, cache_depth, cfg.threads)
        for row_i, qi in enumerate(pool):
            res = results[row_i]
            async_cache[qi, : len(res)] = res.ordinals
            async_cache[qi, len(res) :] = -1

    records: list[StepRecord] = []
    lists_checked = 0
    injections = 0

    for step in range(cfg.steps):
        qidx = schedule[step]
        X = statics.features_train[qidx]
        emb, cache = encode_batch(params, X, "train", rng)

        if step % refresh_every == 0:
            refresh_cache(step)

        results = search(index, emb, depth, cfg.threads)

        # Diagnostics, always from the real-time retrieved lists, pre-update.
        mrr_sum = recall_sum = lex_sum = async_sum = 0.0
        recall_count = 0
        for i, qi in enumerate(qidx):
            top = results[i].ordinals
            row = statics.grades[qi]
            top_grades = row[top[: cfg.diag_depth]]
            rel_top10 = np.nonzero(top_grades[:10] >= cfg.rel_threshold)[0]
            mrr_sum += 1.0 / (rel_top10[0] + 1) if len(rel_top10) else 0.0
            n_rel = statics.n_relevant[qi]
            if n_rel > 0:
                recall_sum += (top_grades >= cfg.rel_threshold).sum() / n_rel
                recall_count += 1
            lex_sum += _overlap_rows(top, statics.lexical_top[qi], cfg.diag_depth)
            async_sum += _overlap_rows(top, async_cache[qi], cfg.diag_depth)
        B = len(qidx)
        diag = (
            float(mrr_sum / B),
            float(recall_sum / recall_count) if recall_count else 0.0,
            float(lex_sum / B),
            float(async_sum / B),
        )

        # Candidate lists per strategy.
        kind = cfg.strategy.kind
        if kind == "ltre":
            lists = []
            for i, qi in enumerate(qidx):
                ords = results[i].ordinals[: cfg.depth_n]
                scores = _exact_scores(doc_rows, ords, emb[i])
                cands = ScoredCandidateList.from_ranked(
                    ordinals=ords, scores=scores, labels=statics.grades[qi][ords]
                )
                cands, did_inject = _inject(
                    cands,
                    statics.rel_ordinals[qi],
                    statics.grades[qi][statics.rel_ordinals[qi]],
                    doc_rows,
                    emb[i],
                )
                injections += did_inject
                lists.append(cands)
        elif kind == "async-ann":
            lists = []
            for i, qi in enumerate(qidx):
                ords = async_cache[qi][: cfg.depth_n]
                ords = ords[ords >= 0]
                scores = _exact_scores(doc_rows, ords, emb[i])
                cands = ScoredCandidateList.from_ranked(
                    ordinals=ords, scores=scores, labels=statics.grades[qi][ords]
                )
                cands, did_inject = _inject(
                    cands,
                    statics.rel_ordinals[qi],
                    statics.grades[qi][statics.rel_ordinals[qi]],
                    doc_rows,
                    emb[i],
                )
                injections += did_inject
                lists.append(cands)
        else:
            lists = _sample_lists(
                cfg.strategy,
                emb,
                doc_rows,
                statics.grades[qidx],
                [statics.rel_ordinals[qi] for qi in qidx],
                [statics.grades[qi][statics.rel_ordinals[qi]] for qi in qidx],
                rng,
                cfg.depth_n,
                lex_rows=[
                    statics.lexical_top[qi][statics.lexical_top[qi] >= 0][: cfg.depth_n]
                    for qi in qidx
                ],
            )

        # Invariant: after sampling/injection every list holds >= 1 relevant doc.
        for cands in lists:
            lists_checked += 1
            if not (cands.labels >= 1).any():
                raise AssertionError(
                    f"step {step}: candidate list without any relevant document"
                )

        if on_step is not None:
            on_step(step, lists, results)

        loss, lr_used = _apply_update(params, opt, cache, lists, doc_rows, emb, cfg.loss)
        records.append(
            StepRecord(
                step=step,
                loss=loss,
                lr=lr_used,
                batch_mrr10=diag[0],
                batch_recall200=diag[1],
                overlap_lexical200=diag[2],
                overlap_async200=diag[3],
            )
        )

    return TrainResult(
        params=params,
        opt_state=opt,
        log=TrainingLog(records=records),
        lists_checked=lists_checked,
        injections=injections,
    )


def evaluate_params(
    params: QueryEncoderParams,
    bundle: CorpusBundle,
    index: FlatIndex | PQIndex | None = None,
    recall_ks: Sequence[int] = (200,),
    rel_threshold: int = 1,
    threads: int = 1,
    statics: TrainerStatics | None = None,
) -> MetricsReport:
    """Evaluate on the held-out queries: eval-mode encoding, top-k search,
    then MRR@10 / Recall@k / NDCG@10 against the qrels."""
    matrix = bundle.doc_embeddings
    if index is None:
        index = FlatIndex(matrix)
    if statics is not None:
        features = statics.features_eval
    else:
        features = np.stack(
            [extract_query_features(q, bundle.term_table) for q in bundle.eval_queries]
        )
    emb, _ = encode_batch(params, features, "eval")
    depth = max(10, *recall_ks) if recall_ks else 10
    results = search(index, emb, depth, threads)
    entries = {
        q.query_id: [
            (matrix.doc_ids[o], float(s)) for o, s in zip(res.ordinals, res.scores)
        ]
        for q, res in zip(bundle.eval_queries, results)
    }
    run = RunRanking(entries=entries)
    return evaluate_run(run, bundle.qrels, recall_ks=recall_ks, rel_threshold=rel_threshold)
