"""Command-line surface: gen, index, train, eval, diagnose.

Experiments are driven by a JSON config (schema below) with flag overrides;
every command is deterministic given the same inputs and seed. Logging level
comes from the LTRE_LOG_LEVEL environment variable.

Config schema (unknown keys are rejected):

    {
      "synthetic": { ... SyntheticSpec fields ... },
      "train":     { "strategy": "ltre", "steps": 3000, ... },
      "index":     { "kind": "flat" } | { "kind": "pq", "m": 8, "bits": 8,
                                          "opq_iters": 2, "kmeans_iters": 20 },
      "paths":     { "out_dir": "runs/exp" }
    }
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .corpus import CorpusBundle, SyntheticSpec, generate_synthetic
from .encoder import (
    DocEmbeddingMatrix,
    TermEmbeddingTable,
    encode_batch,
    extract_query_features,
    load_checkpoint,
    save_checkpoint,
)
from .index import (
    FlatIndex,
    build_pq_index,
    load_embeddings,
    load_pq_index,
    save_embeddings,
    save_pq_index,
    search as index_search,
    train_pq,
)
from .loss import LossKind
from .metrics import RunRanking, write_run
from .trainer import (
    Strategy,
    TrainConfig,
    evaluate_params,
    train_loop,
)

log = logging.getLogger(__name__)

DEFAULT_CONFIG: dict = {
    "synthetic": {
        "num_topics": 16,
        "num_docs": 10000,
        "num_train_queries": 2000,
        "num_eval_queries": 500,
        "dim_k": 64,
        "doc_noise": 0.1,
        "query_noise": 0.0,
        "mismatch_rate": 0.5,
        "vocab_size": 1600,
        "terms_per_doc": 30,
        "terms_per_query": 12,
        "seed": 42,
    },
    "train": {
        "strategy": "ltre",
        "steps": 3000,
        "batch_size": 32,
        "depth_n": 100,
        "loss": "ranknet",
        "lr": 0.01,
        "beta1": 0.9,
        "beta2": 0.999,
        "weight_decay": 0.01,
        "warmup_steps": 200,
        "total_steps": None,
        "dropout_p": 0.1,
        "use_layer_norm": True,
        "init_noise": 0.02,
        "refresh_every": 500,
        "async_diag_refresh": 500,
        "bm25_k1": 0.9,
        "bm25_b": 0.4,
        "rel_threshold": 1,
        "threads": 1,
        "seed": 0,
    },
    "index": {"kind": "flat"},
    "paths": {"out_dir": "runs/default"},
}

_STRATEGY_NAMES = ("ltre", "rand-neg", "lexical-neg", "in-batch-neg", "nce-neg", "async-ann")


class ConfigError(ValueError):
    pass


def _check_keys(section: dict, allowed: dict, where: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _merged(defaults: dict, overrides: dict, where: str) -> dict:
    _check_keys(overrides, defaults, where)
    out = dict(defaults)
    out.update(overrides)
    return out


@dataclass
class ExperimentConfig:
    synthetic: SyntheticSpec
    train: TrainConfig
    index_kind: str  # "flat" or "pqM"
    index_params: dict
    out_dir: Path

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        _check_keys(raw, DEFAULT_CONFIG, "config")
        syn = _merged(DEFAULT_CONFIG["synthetic"], raw.get("synthetic", {}), "synthetic")
        trn = _merged(DEFAULT_CONFIG["train"], raw.get("train", {}), "train")
        idx = dict(raw.get("index", DEFAULT_CONFIG["index"]))
        paths = _merged(DEFAULT_CONFIG["paths"], raw.get("paths", {}), "paths")

        spec = SyntheticSpec(**syn)
        try:
            spec.validate()
        except ValueError as e:
            raise ConfigError(f"synthetic: {e}") from e

        if trn["strategy"] not in _STRATEGY_NAMES:
            raise ConfigError(f"train.strategy: unknown strategy {trn['strategy']!r}")
        strategy = Strategy(kind=trn["strategy"], refresh_every=int(trn["refresh_every"]))
        try:
            loss = LossKind.parse(trn["loss"])
        except ValueError as e:
            raise ConfigError(f"train.loss: {e}") from e
        cfg = TrainConfig(
            strategy=strategy,
            steps=int(trn["steps"]),
            batch_size=int(trn["batch_size"]),
            depth_n=int(trn["depth_n"]),
            loss=loss,
            lr=float(trn["lr"]),
            beta1=float(trn["beta1"]),
            beta2=float(trn["beta2"]),
            weight_decay=float(trn["weight_decay"]),
            warmup_steps=int(trn["warmup_steps"]),
            total_steps=None if trn["total_steps"] is None else int(trn["total_steps"]),
            dropout_p=float(trn["dropout_p"]),
            use_layer_norm=bool(trn["use_layer_norm"]),
            init_noise=float(trn["init_noise"]),
            async_diag_refresh=int(trn["async_diag_refresh"]),
            bm25_k1=float(trn["bm25_k1"]),
            bm25_b=float(trn["bm25_b"]),
            rel_threshold=int(trn["rel_threshold"]),
            threads=int(trn["threads"]),
            seed=int(trn["seed"]),
        )
        try:
            cfg.validate()
        except ValueError as e:
            raise ConfigError(f"train: {e}") from e

        kind = idx.pop("kind", "flat")
        if kind == "flat":
            if idx:
                raise ConfigError(f"unknown key(s) in index: {sorted(idx)}")
            params: dict = {}
        elif kind == "pq":
            defaults = {"m": 8, "bits": 8, "opq_iters": 2, "kmeans_iters": 20}
            params = _merged(defaults, idx, "index")
        else:
            raise ConfigError(f"index.kind: expected 'flat' or 'pq', got {kind!r}")

        return cls(
            synthetic=spec,
            train=cfg,
            index_kind=kind,
            index_params=params,
            out_dir=Path(paths["out_dir"]),
        )


def _parse_index_flag(value: str) -> dict:
    if value == "flat":
        return {"kind": "flat"}
    if value.startswith("pq"):
        try:
            m = int(value[2:])
        except ValueError:
            raise ConfigError(f"--index: expected 'flat' or 'pq<m>', got {value!r}") from None
        return {"kind": "pq", "m": m}
    raise ConfigError(f"--index: expected 'flat' or 'pq<m>', got {value!r}")


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    raw: dict = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            raw = json.load(f)
    raw.setdefault("synthetic", {})
    raw.setdefault("train", {})
    raw.setdefault("paths", {})
    if args.seed is not None:
        raw["synthetic"]["seed"] = args.seed
        raw["train"]["seed"] = args.seed
    if getattr(args, "strategy", None):
        raw["train"]["strategy"] = args.strategy
    if getattr(args, "steps", None) is not None:
        raw["train"]["steps"] = args.steps
    if getattr(args, "depth", None) is not None:
        raw["train"]["depth_n"] = args.depth
    if getattr(args, "loss", None):
        raw["train"]["loss"] = args.loss
    if getattr(args, "threads", None) is not None:
        raw["train"]["threads"] = args.threads
    if getattr(args, "index", None):
        raw["index"] = _parse_index_flag(args.index)
    if args.out_dir:
        raw["paths"]["out_dir"] = args.out_dir
    return ExperimentConfig.from_dict(raw)


# File names inside an experiment directory.
F_COLLECTION = "collection.tsv"
F_QUERIES_TRAIN = "queries_train.tsv"
F_QUERIES_EVAL = "queries_eval.tsv"
F_QRELS = "qrels.txt"
F_DOC_EMB = "doc_embeddings.bin"
F_TERM_TABLE = "term_table.bin"
F_TERM_VOCAB = "term_vocab.txt"
F_INDEX_META = "index_meta.json"
F_PQ_INDEX = "index_pq.bin"
F_CHECKPOINT = "checkpoint.ltrp"
F_TRAIN_LOG = "training_log.csv"
F_RUN = "run.trec"
F_METRICS_JSON = "metrics.json"
F_METRICS_CSV = "metrics.csv"
F_DIAGNOSTICS = "diagnostics.csv"
F_GRID = "consistency_grid.csv"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path} (run the producing command first)")
    return path


def cmd_gen(cfg: ExperimentConfig) -> int:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    bundle = generate_synthetic(cfg.synthetic)
    corpus_mod.save_collection(bundle.documents, out / F_COLLECTION)
    corpus_mod.save_queries(bundle.train_queries, out / F_QUERIES_TRAIN)
    corpus_mod.save_queries(bundle.eval_queries, out / F_QUERIES_EVAL)
    corpus_mod.save_qrels(bundle.qrels, out / F_QRELS)
    save_embeddings(bundle.doc_embeddings, out / F_DOC_EMB)
    table_as_matrix = DocEmbeddingMatrix(
        rows=bundle.term_table.vectors, doc_ids=list(bundle.term_table.terms)
    )
    save_embeddings(table_as_matrix, out / F_TERM_TABLE)
    with open(out / F_TERM_VOCAB, "w", encoding="utf-8") as f:
        for t in bundle.term_table.terms:
            f.write(t + "\n")
    manifest = {"synthetic": asdict(cfg.synthetic)}
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    print(f"gen: wrote corpus ({len(bundle.documents)} docs, "
          f"{len(bundle.train_queries)}+{len(bundle.eval_queries)} queries) to {out}")
    return 0


def load_bundle(out_dir: Path) -> CorpusBundle:
    documents = corpus_mod.load_collection(_require(out_dir / F_COLLECTION, "collection"))
    train_q = corpus_mod.load_queries(_require(out_dir / F_QUERIES_TRAIN, "training queries"))
    eval_q = corpus_mod.load_queries(_require(out_dir / F_QUERIES_EVAL, "eval queries"))
    qrels = corpus_mod.load_qrels(_require(out_dir / F_QRELS, "qrels"))
    doc_ids = [d.doc_id for d in documents]
    matrix = load_embeddings(_require(out_dir / F_DOC_EMB, "document embeddings"), doc_ids)
    terms = (
        _require(out_dir / F_TERM_VOCAB, "term vocabulary").read_text("utf-8").splitlines()
    )
    table_matrix = load_embeddings(_require(out_dir / F_TERM_TABLE, "term table"), list(terms))
    table = TermEmbeddingTable(vectors=table_matrix.rows, terms=list(terms))
    return CorpusBundle(
        documents=documents,
        train_queries=train_q,
        eval_queries=eval_q,
        qrels=qrels,
        doc_embeddings=matrix,
        term_table=table,
    )


def _build_index(cfg: ExperimentConfig, bundle: CorpusBundle, out: Path, write: bool = False):
    if cfg.index_kind == "flat":
        if write:
            meta = {"kind": "flat"}
            with open(out / F_INDEX_META, "w", encoding="utf-8") as f:
                json.dump(meta, f, indent=2, sort_keys=True)
        return FlatIndex(bundle.doc_embeddings)
    p = cfg.index_params
    codebooks = train_pq(
        bundle.doc_embeddings,
        m=int(p["m"]),
        bits=int(p["bits"]),
        opq_iters=int(p["opq_iters"]),
        kmeans_iters=int(p["kmeans_iters"]),
        seed=cfg.train.seed,
    )
    index = build_pq_index(codebooks, bundle.doc_embeddings)
    if write:
        save_pq_index(index, out / F_PQ_INDEX)
        meta = {"kind": "pq", **{k: int(v) for k, v in p.items()}}
        with open(out / F_INDEX_META, "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
    return index


def _load_index(cfg: ExperimentConfig, bundle: CorpusBundle, out: Path):
    meta_path = out / F_INDEX_META
    if meta_path.exists():
        meta = json.loads(meta_path.read_text("utf-8"))
        if meta.get("kind") == "pq":
            return load_pq_index(_require(out / F_PQ_INDEX, "pq index"))
        return FlatIndex(bundle.doc_embeddings)
    # No prebuilt index: build in memory from the config.
    return _build_index(cfg, bundle, out, write=False)


def cmd_index(cfg: ExperimentConfig) -> int:
    out = cfg.out_dir
    bundle = load_bundle(out)
    _build_index(cfg, bundle, out, write=True)
    print(f"index: built {cfg.index_kind} index in {out}")
    return 0


def cmd_train(cfg: ExperimentConfig) -> int:
    out = cfg.out_dir
    bundle = load_bundle(out)
    index = _load_index(cfg, bundle, out)
    init = None
    init_path = out / "init_checkpoint.ltrp"
    if init_path.exists():
        init = load_checkpoint(init_path)
        log.info("initialized from %s", init_path)
    result = train_loop(cfg.train, bundle, index=index, init_params=init)
    save_checkpoint(result.params, out / F_CHECKPOINT)
    result.log.write_csv(out / F_TRAIN_LOG)
    last = result.log.records[-1].loss if len(result.log) else float("nan")
    print(f"train: {cfg.train.steps} steps ({cfg.train.strategy.kind}), "
          f"final loss {last:.6f}, checkpoint -> {out / F_CHECKPOINT}")
    return 0


def cmd_eval(cfg: ExperimentConfig) -> int:
    out = cfg.out_dir
    bundle = load_bundle(out)
    index = _load_index(cfg, bundle, out)
    params = load_checkpoint(_require(out / F_CHECKPOINT, "checkpoint"))
    report = evaluate_params(
        params,
        bundle,
        index=index,
        recall_ks=(200,),
        rel_threshold=cfg.train.rel_threshold,
        threads=cfg.train.threads,
    )
    # Re-run the search at depth 200 to emit the run file.
    features = np.stack(
        [extract_query_features(q, bundle.term_table) for q in bundle.eval_queries]
    )
    emb, _ = encode_batch(params, features, "eval")
    results = index_search(index, emb, 200, cfg.train.threads)
    entries = {
        q.query_id: [
            (bundle.doc_embeddings.doc_ids[o], float(s))
            for o, s in zip(res.ordinals, res.scores)
        ]
        for q, res in zip(bundle.eval_queries, results)
    }
    write_run(RunRanking(entries=entries), out / F_RUN)
    (out / F_METRICS_JSON).write_text(report.to_json(), "utf-8")
    (out / F_METRICS_CSV).write_text(
        report.csv_header() + "\n" + report.to_csv_line() + "\n", "utf-8"
    )
    print(f"eval: mrr@10={report.mrr_at_10:.4f} recall@200={report.recall_at_k[200]:.4f} "
          f"ndcg@10={report.ndcg_at_10:.4f} -> {out / F_METRICS_JSON}")
    return 0


def cmd_diagnose(cfg: ExperimentConfig) -> int:
    """Training-dynamics CSV for the configured strategy plus a train-index x
    eval-index grid of held-out NDCG@10 over {flat, pq8, pq4}."""
    out = cfg.out_dir
    bundle = load_bundle(out)
    index = _load_index(cfg, bundle, out)
    result = train_loop(cfg.train, bundle, index=index)
    result.log.write_csv(out / F_DIAGNOSTICS)

    from .trainer import TrainerStatics

    statics = TrainerStatics.build(
        bundle,
        lexical_depth=max(cfg.train.diag_depth, cfg.train.depth_n),
        k1=cfg.train.bm25_k1,
        b=cfg.train.bm25_b,
    )
    grid_kinds = ["flat", "pq8", "pq4"]
    indexes = {}
    for kind_name in grid_kinds:
        if kind_name == "flat":
            indexes[kind_name] = FlatIndex(bundle.doc_embeddings)
        else:
            m = int(kind_name[2:])
            cb = train_pq(
                bundle.doc_embeddings,
                m=m,
                bits=8,
                opq_iters=int(cfg.index_params.get("opq_iters", 2)),
                kmeans_iters=int(cfg.index_params.get("kmeans_iters", 20)),
                seed=cfg.train.seed,
            )
            indexes[kind_name] = build_pq_index(cb, bundle.doc_embeddings)

    rows = []
    for train_kind in grid_kinds:
        res = train_loop(cfg.train, bundle, index=indexes[train_kind], statics=statics)
        row = []
        for eval_kind in grid_kinds:
            report = evaluate_params(
                res.params, bundle, index=indexes[eval_kind], statics=statics
            )
            row.append(report.ndcg_at_10)
        rows.append(row)

    with open(out / F_GRID, "w", encoding="utf-8") as f:
        f.write("train\\eval," + ",".join(grid_kinds) + "\n")
        for train_kind, row in zip(grid_kinds, rows):
            f.write(train_kind + "," + ",".join(f"{v!r}" for v in row) + "\n")
    print(f"diagnose: wrote {out / F_DIAGNOSTICS} and {out / F_GRID}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ltre",
        description="Dense-retrieval training lab: generate corpora, build "
        "indexes, train retrieval models, and evaluate them.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("gen", "generate a synthetic corpus with ground truth"),
        ("index", "build the retrieval index"),
        ("train", "train a query encoder"),
        ("eval", "evaluate a checkpoint on the held-out queries"),
        ("diagnose", "emit training-dynamics and index-consistency CSVs"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override both corpus and training seeds")
        p.add_argument("--strategy", choices=_STRATEGY_NAMES, help="training strategy")
        p.add_argument("--index", help="index choice: flat or pq<m> (e.g. pq8)")
        p.add_argument("--depth", type=int, help="training retrieval depth n")
        p.add_argument("--steps", type=int, help="number of training steps")
        p.add_argument("--loss", help="ranknet or lambdarank:<mrr@10|ndcg@10>")
        p.add_argument("--threads", type=int, help="query-level search parallelism")
        p.add_argument("--out-dir", help="experiment directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("LTRE_LOG_LEVEL", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args)
        handler = {
            "gen": cmd_gen,
            "index": cmd_index,
            "train": cmd_train,
            "eval": cmd_eval,
            "diagnose": cmd_diagnose,
        }[args.command]
        return handler(cfg)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
