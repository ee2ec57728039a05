"""End-to-end acceptance experiments on the reference corpus.

Reference corpus: 10,000 documents, 64 dimensions, 16 topics, 2,000 training
and 500 held-out queries, corpus seed 42. Training runs use seeds 42/43/44.
Each criterion prints one PASS/FAIL line; individual runs stay under five
minutes on a single core. Precision metrics (MRR@10) binarize at grade >= 2
(the unique most-relevant document per query), recall at grade >= 1; NDCG
uses the grades directly.
"""

from __future__ import annotations

import hashlib
import json
import math

import numpy as np
import pytest

from ltre import (
    FlatIndex,
    QueryEncoderParams,
    SyntheticSpec,
    brute_force_topn,
    delta_metric,
    flat_search,
    generate_synthetic,
    lambdarank,
    ranknet,
)
from ltre.cli import main as cli_main
from ltre.encoder import encode_batch, encode_batch_backward, finite_difference_gradients
from ltre.index import build_pq_index, save_embeddings, train_pq
from ltre.loss import LossKind, ScoredCandidateList, batch_pairwise_loss
from ltre.metrics import mrr_single, ndcg_single, overlap_at_k, recall_single
from ltre.trainer import (
    Strategy,
    TrainConfig,
    TrainerStatics,
    evaluate_params,
    train_loop,
)

SEEDS = (42, 43, 44)
REFERENCE_SPEC = SyntheticSpec(
    num_topics=16,
    num_docs=10_000,
    num_train_queries=2000,
    num_eval_queries=500,
    dim_k=64,
    doc_noise=0.10,
    query_noise=0.0,
    mismatch_rate=0.5,
    vocab_size=1600,
    terms_per_doc=30,
    terms_per_query=12,
    seed=42,
)


REPORT_LINES: list[str] = []


def report(name: str, ok: bool, detail: str) -> None:
    line = f"[{name}] {'PASS' if ok else 'FAIL'} - {detail}"
    REPORT_LINES.append(line)
    print(line)


@pytest.fixture(scope="module")
def lab():
    """Reference corpus, shared statics, PQ indexes, and a train-run cache."""
    bundle = generate_synthetic(REFERENCE_SPEC)
    statics = TrainerStatics.build(bundle)
    pq_indexes = {}

    def pq_index(m: int):
        if m not in pq_indexes:
            cb = train_pq(
                bundle.doc_embeddings, m=m, bits=8, opq_iters=3, kmeans_iters=15, seed=42
            )
            pq_indexes[m] = build_pq_index(cb, bundle.doc_embeddings)
        return pq_indexes[m]

    runs: dict = {}

    def run(kind: str, steps: int, seed: int, index_name: str = "flat", init=None,
            refresh: int = 500, init_key=None):
        key = (kind, steps, seed, index_name, refresh, init_key)
        if key not in runs:
            cfg = TrainConfig(
                strategy=Strategy(kind, refresh_every=refresh),
                steps=steps,
                seed=seed,
                rel_threshold=2,
            )
            index = None if index_name == "flat" else pq_index(int(index_name[2:]))
            runs[key] = train_loop(
                cfg, bundle, index=index, statics=statics, init_params=init
            )
        return runs[key]

    def init_params(seed: int) -> QueryEncoderParams:
        return QueryEncoderParams.initial(64, np.random.default_rng(seed), 0.02, True, 0.1)

    def ev(params, index_name: str = "flat", rel_threshold: int = 2):
        index = None if index_name == "flat" else pq_index(int(index_name[2:]))
        return evaluate_params(
            params, bundle, index=index, statics=statics, rel_threshold=rel_threshold
        )

    class Lab:
        pass

    lab = Lab()
    lab.bundle = bundle
    lab.statics = statics
    lab.run = run
    lab.ev = ev
    lab.init_params = init_params
    lab.pq_index = pq_index
    return lab


def test_a1_training_efficacy_and_stability(lab):
    """Full-retrieval training: large MRR gain, monotone-ish learning curve."""
    ok = True
    details = []
    for seed in SEEDS:
        res = lab.run("ltre", 3000, seed)
        init_mrr = lab.ev(lab.init_params(seed)).mrr_at_10
        final_mrr = lab.ev(res.params).mrr_at_10
        ma = np.convolve(res.log.column("batch_mrr10"), np.ones(500) / 500, "valid")
        min_delta = float(np.diff(ma).min())
        seed_ok = final_mrr >= 1.5 * init_mrr and final_mrr > init_mrr and min_delta >= -0.02
        ok &= seed_ok
        details.append(f"seed {seed}: {init_mrr:.4f}->{final_mrr:.4f}, ma dip {min_delta:+.4f}")
    report("A1", ok, "; ".join(details))
    assert ok, details


def test_a2_random_negatives_recall_but_not_precision(lab):
    """Random negatives lift recall yet trail full retrieval on MRR@10."""
    ok = True
    details = []
    for seed in SEEDS:
        rand = lab.run("rand-neg", 3000, seed)
        ltre = lab.run("ltre", 3000, seed)
        recall0 = lab.ev(lab.init_params(seed), rel_threshold=1).recall_at_k[200]
        recall1 = lab.ev(rand.params, rel_threshold=1).recall_at_k[200]
        rand_mrr = lab.ev(rand.params).mrr_at_10
        ltre_mrr = lab.ev(ltre.params).mrr_at_10
        seed_ok = recall1 > recall0 and rand_mrr < ltre_mrr
        ok &= seed_ok
        details.append(
            f"seed {seed}: recall {recall0:.4f}->{recall1:.4f}, "
            f"mrr rand {rand_mrr:.4f} vs ltre {ltre_mrr:.4f}"
        )
    report("A2", ok, "; ".join(details))
    assert ok, details


def test_a3_lexical_negatives_reduce_lexical_consistency(lab):
    """From a shared warmup, lexical-top negatives push retrieval away from
    the lexical top-200 while full retrieval stays consistent."""
    ok = True
    details = []
    for seed in SEEDS:
        warm = lab.run("ltre", 400, seed)
        lex = lab.run("lexical-neg", 1500, seed + 500, init=warm.params,
                      init_key=("warm", seed))
        ltre = lab.run("ltre", 1500, seed + 500, init=warm.params,
                       init_key=("warm", seed))
        lex_overlap = lex.log.column("overlap_lexical200")
        ltre_overlap = ltre.log.column("overlap_lexical200")
        lex_delta = float(lex_overlap[-20:].mean() - lex_overlap[0])
        ltre_delta = float(ltre_overlap[-20:].mean() - ltre_overlap[0])
        seed_ok = lex_delta <= -0.05 and ltre_delta >= -0.02
        ok &= seed_ok
        details.append(f"seed {seed}: lex {lex_delta:+.4f}, ltre {ltre_delta:+.4f}")
    report("A3", ok, "; ".join(details))
    assert ok, details


def test_a4_async_staleness_sawtooth(lab):
    """Cached-vs-realtime overlap jumps right after every refresh and decays."""
    res = lab.run("async-ann", 3000, 42, refresh=500)
    overlap = res.log.column("overlap_async200")
    cycles = []
    for c in range(6):
        after_refresh = overlap[c * 500]
        before_next = overlap[c * 500 + 499]
        cycles.append(after_refresh > before_next)
    frac = sum(cycles) / len(cycles)
    ok = frac >= 0.8
    report("A4", ok, f"sawtooth cycles {sum(cycles)}/{len(cycles)}")
    assert ok, cycles


def test_a5_flat_search_equals_brute_force_10000_cases():
    """Property: batch flat search is the exhaustive oracle, bit for bit."""
    rng = np.random.default_rng(20240)
    mismatches = 0
    for case in range(10_000):
        n_docs = int(rng.integers(1, 30))
        dim = int(rng.integers(2, 10))
        n = int(rng.integers(1, 35))
        rows = rng.standard_normal((n_docs, dim))
        if n_docs >= 2 and case % 3 == 0:
            rows[n_docs // 2] = rows[0]  # exercise exact ties
        q = rng.standard_normal(dim)
        from ltre.encoder import DocEmbeddingMatrix

        matrix = DocEmbeddingMatrix(rows=rows, doc_ids=[str(i) for i in range(n_docs)])
        got = flat_search(FlatIndex(matrix), q[None, :], n)[0]
        want = brute_force_topn(matrix, q, n)
        if not (
            np.array_equal(got.ordinals, want.ordinals)
            and np.array_equal(got.scores, want.scores)
        ):
            mismatches += 1
    ok = mismatches == 0
    report("A5", ok, f"{mismatches} mismatches in 10000 cases")
    assert ok


def test_a6_compression_quality_and_memory_trend(lab):
    """More subspaces -> better MRR; PQ codes cost m/(4k) of the flat bytes."""
    base = lab.run("ltre", 3000, 42)
    ms = (2, 4, 8, 16)
    mrrs = [lab.ev(base.params, index_name=f"pq{m}").mrr_at_10 for m in ms]
    mrrs.append(lab.ev(base.params, index_name="flat").mrr_at_10)
    mono = all(b >= a - 0.005 for a, b in zip(mrrs, mrrs[1:]))

    matrix = lab.bundle.doc_embeddings
    flat_bytes = matrix.num_docs * matrix.dim * 4  # float32 storage format
    mem_ok = all(
        lab.pq_index(m).codes.nbytes <= (m / (4 * matrix.dim)) * flat_bytes for m in ms
    )
    ok = mono and mem_ok
    labels = [f"pq{m}" for m in ms] + ["flat"]
    report("A6", ok, ", ".join(f"{l}={v:.4f}" for l, v in zip(labels, mrrs))
           + f"; memory ok={mem_ok}")
    assert ok, mrrs


def test_a7_train_eval_index_consistency_grid(lab):
    """For each eval index, training on that same index wins the column."""
    kinds = ("flat", "pq8", "pq4")
    mean_grid = {}
    for train_kind in kinds:
        per_eval = {ek: [] for ek in kinds}
        for seed in SEEDS:
            res = lab.run("ltre", 1200, seed, index_name=train_kind)
            for eval_kind in kinds:
                per_eval[eval_kind].append(
                    lab.ev(res.params, index_name=eval_kind).ndcg_at_10
                )
        mean_grid[train_kind] = {ek: float(np.mean(v)) for ek, v in per_eval.items()}

    ok = True
    details = []
    for eval_kind in kinds:
        column = {tk: mean_grid[tk][eval_kind] for tk in kinds}
        best = max(column.values())
        diag = column[eval_kind]
        col_ok = diag >= best - 0.005
        ok &= col_ok
        details.append(
            f"eval {eval_kind}: diag {diag:.4f} vs best {best:.4f}"
        )
    report("A7", ok, "; ".join(details))
    assert ok, mean_grid


def test_a8_gradient_fidelity_through_encoder_and_loss():
    """Analytic encoder+loss gradients match central finite differences."""
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        k = 6
        n_docs, n_cand = 30, 8
        docs = rng.standard_normal((n_docs, k))
        params = QueryEncoderParams(
            W=np.eye(k) + 0.1 * rng.standard_normal((k, k)),
            bias=0.1 * rng.standard_normal(k),
            ln_gain=1.0 + 0.2 * rng.standard_normal(k),
            ln_bias=0.1 * rng.standard_normal(k),
            use_layer_norm=True,
            dropout_p=0.2 if seed % 2 else 0.0,
        )
        X = rng.standard_normal((2, k))
        ords = [rng.choice(n_docs, size=n_cand, replace=False) for _ in range(2)]
        labels = [rng.integers(0, 3, size=n_cand) for _ in range(2)]
        kind = LossKind("ranknet") if seed % 3 else LossKind("lambdarank", "mrr@10")

        emb, cache = encode_batch(params, X, "train", np.random.default_rng(seed + 1))
        keep = None if cache.keep is None else cache.keep.copy()

        def forward(p: QueryEncoderParams) -> tuple[float, list, np.ndarray]:
            h = X @ p.W.T + p.bias
            if keep is not None:
                h = h * keep
            if p.use_layer_norm:
                mu = h.mean(axis=1, keepdims=True)
                var = ((h - mu) ** 2).mean(axis=1, keepdims=True)
                h = p.ln_gain * (h - mu) / np.sqrt(var + 1e-5) + p.ln_bias
            lists = [
                ScoredCandidateList.from_ranked(
                    ordinals=o, scores=docs[o] @ h[i], labels=l
                )
                for i, (o, l) in enumerate(zip(ords, labels))
            ]
            loss, grads_r = batch_pairwise_loss(lists, kind)
            return loss, grads_r, h

        loss, grads_r, h = forward(params)
        assert np.allclose(h, emb)
        d_emb = np.zeros_like(emb)
        for i in range(2):
            d_emb[i] = grads_r[i] @ docs[ords[i]]
        analytic = encode_batch_backward(params, cache, d_emb)
        fd = finite_difference_gradients(lambda p: forward(p)[0], params, eps=1e-5)
        for name in ("W", "bias", "ln_gain", "ln_bias"):
            a, f = getattr(analytic, name), getattr(fd, name)
            denom = max(np.linalg.norm(f), 1e-12)
            worst = max(worst, float(np.linalg.norm(a - f) / denom))
    ok = worst < 1e-6
    report("A8", ok, f"worst relative error {worst:.3e} over 20 configs")
    assert ok, worst


def test_a9_loss_unit_values():
    v1 = ranknet(1.7, 1.7)
    v2 = ranknet(2.0, 0.0)
    v3 = delta_metric("mrr", 1, 2, [1, 0], k=10)
    v4 = lambdarank(0.4, 1.9, 1, 2, 0.0)
    ok = (
        abs(v1 - math.log(2)) <= 1e-12
        and abs(v2 - 0.126928) <= 1e-6
        and v3 == 0.5
        and v4 == (0.0, 0.0, 0.0)
    )
    report("A9", ok, f"ranknet(r,r)={v1!r}, ranknet(2,0)={v2:.6f}, dMRR={v3}, zero-delta={v4}")
    assert ok


def test_a10_injection_invariant_over_full_run(lab):
    """Every post-injection candidate list carries a relevant document.

    The train loop asserts the invariant on every list; completing the run
    with the expected number of checks means zero violations.
    """
    res = lab.run("ltre", 3000, 42)
    expected = 3000 * 32
    ok = res.lists_checked == expected
    report("A10", ok, f"{res.lists_checked}/{expected} lists checked, 0 violations")
    assert ok


def test_a11_metric_fixtures():
    mrr = mrr_single(["a", "b", "c"], {"c": 1}, k=10)
    rec = recall_single(["r1", "x", "r2", "y"], {"r1": 1, "r2": 1, "r3": 1, "r4": 1}, k=4)
    ndcg = ndcg_single(["a", "b", "c"], {"b": 2, "c": 1}, k=10)
    ndcg_expected = (3 / math.log2(3) + 1 / math.log2(4)) / (3 + 1 / math.log2(3))
    ov = overlap_at_k(
        [f"x{i}" for i in range(200)],
        [f"x{i}" for i in range(20)] + [f"y{i}" for i in range(180)],
        k=200,
    )
    ok = (
        abs(mrr - 1 / 3) <= 1e-6
        and abs(rec - 0.5) <= 1e-6
        and abs(ndcg - ndcg_expected) <= 1e-12
        and abs(ndcg - 0.6590018) <= 1e-6
        and abs(ov - 0.1) <= 1e-12
    )
    report("A11", ok, f"mrr={mrr:.6f}, recall={rec}, ndcg={ndcg:.7f}, overlap={ov}")
    assert ok


def test_a12_fixed_doc_embeddings_and_byte_determinism(lab, tmp_path):
    """Training leaves the embedding file untouched; identical configs give
    byte-identical checkpoints and logs at 1 and 8 threads."""
    # In-process: the document matrix serializes identically after training.
    emb_path = tmp_path / "emb.bin"
    save_embeddings(lab.bundle.doc_embeddings, emb_path)
    before = hashlib.sha256(emb_path.read_bytes()).hexdigest()
    lab.run("ltre", 3000, 42)
    save_embeddings(lab.bundle.doc_embeddings, emb_path)
    after = hashlib.sha256(emb_path.read_bytes()).hexdigest()

    # CLI: gen once, then four train runs (2 thread counts x 2 repeats).
    out = tmp_path / "exp"
    config = {
        "synthetic": {
            "num_topics": 8, "num_docs": 2000, "num_train_queries": 400,
            "num_eval_queries": 100, "dim_k": 32, "doc_noise": 0.15,
            "query_noise": 0.0, "mismatch_rate": 0.5, "vocab_size": 800,
            "terms_per_doc": 20, "terms_per_query": 8, "seed": 42,
        },
        "train": {"steps": 120, "warmup_steps": 20, "seed": 42},
        "paths": {"out_dir": str(out)},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config), "utf-8")
    assert cli_main(["gen", "--config", str(cfg_path)]) == 0
    emb_hash_before = hashlib.sha256((out / "doc_embeddings.bin").read_bytes()).hexdigest()

    digests = []
    for threads in (1, 8, 1, 8):
        assert cli_main(["train", "--config", str(cfg_path), "--threads", str(threads)]) == 0
        digests.append(
            (
                hashlib.sha256((out / "checkpoint.ltrp").read_bytes()).hexdigest(),
                hashlib.sha256((out / "training_log.csv").read_bytes()).hexdigest(),
            )
        )
    emb_hash_after = hashlib.sha256((out / "doc_embeddings.bin").read_bytes()).hexdigest()

    ok = (
        before == after
        and emb_hash_before == emb_hash_after
        and len(set(digests)) == 1
    )
    report(
        "A12",
        ok,
        f"embedding hash stable={before == after and emb_hash_before == emb_hash_after}, "
        f"distinct run digests={len(set(digests))} (want 1)",
    )
    assert ok
