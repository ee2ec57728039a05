from __future__ import annotations

import hashlib
import json

import pytest

from ltre.cli import ExperimentConfig, main


SMALL = {
    "synthetic": {
        "num_topics": 4,
        "num_docs": 200,
        "num_train_queries": 40,
        "num_eval_queries": 20,
        "dim_k": 16,
        "doc_noise": 0.1,
        "query_noise": 0.1,
        "mismatch_rate": 0.5,
        "vocab_size": 160,
        "terms_per_doc": 12,
        "terms_per_query": 6,
        "seed": 9,
    },
    "train": {
        "steps": 8,
        "batch_size": 4,
        "depth_n": 10,
        "warmup_steps": 2,
        "seed": 9,
    },
}


def write_config(tmp_path, overrides=None, out_name="exp"):
    raw = json.loads(json.dumps(SMALL))
    if overrides:
        for section, vals in overrides.items():
            raw.setdefault(section, {}).update(vals)
    raw.setdefault("paths", {})["out_dir"] = str(tmp_path / out_name)
    p = tmp_path / "config.json"
    p.write_text(json.dumps(raw), "utf-8")
    return p


def hash_file(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestConfigValidation:
    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown key"):
            ExperimentConfig.from_dict({"synthetic": {"bogus_field": 1}})

    def test_invalid_mismatch_rate_names_field(self):
        with pytest.raises(ValueError, match="mismatch_rate"):
            ExperimentConfig.from_dict({"synthetic": {"mismatch_rate": 1.5}})

    def test_bad_index_kind(self):
        with pytest.raises(ValueError, match="index.kind"):
            ExperimentConfig.from_dict({"index": {"kind": "hnsw"}})

    def test_defaults_parse(self):
        cfg = ExperimentConfig.from_dict({})
        assert cfg.index_kind == "flat"
        assert cfg.train.strategy.kind == "ltre"


class TestHelp:
    def test_top_level_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["--help"])
        assert e.value.code == 0
        out = capsys.readouterr().out
        for cmd in ("gen", "index", "train", "eval", "diagnose"):
            assert cmd in out

    def test_subcommand_help_documents_flags(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["train", "--help"])
        assert e.value.code == 0
        out = capsys.readouterr().out
        for flag in ("--config", "--seed", "--strategy", "--index", "--depth",
                     "--steps", "--loss", "--threads", "--out-dir"):
            assert flag in out


class TestGen:
    def test_gen_writes_expected_files(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["gen", "--config", str(cfg)]) == 0
        out = tmp_path / "exp"
        for name in ("collection.tsv", "queries_train.tsv", "queries_eval.tsv",
                     "qrels.txt", "doc_embeddings.bin", "term_table.bin",
                     "term_vocab.txt"):
            assert (out / name).exists(), name
        lines = (out / "collection.tsv").read_text("utf-8").splitlines()
        assert len(lines) == 200

    def test_gen_deterministic_bytes(self, tmp_path):
        cfg_a = write_config(tmp_path, out_name="a")
        main(["gen", "--config", str(cfg_a)])
        cfg_b = write_config(tmp_path, out_name="b")
        main(["gen", "--config", str(cfg_b)])
        for name in ("collection.tsv", "qrels.txt", "doc_embeddings.bin"):
            assert hash_file(tmp_path / "a" / name) == hash_file(tmp_path / "b" / name)

    def test_gen_invalid_config_errors(self, tmp_path, capsys):
        cfg = write_config(tmp_path, overrides={"synthetic": {"mismatch_rate": 1.5}})
        assert main(["gen", "--config", str(cfg)]) == 2
        assert "mismatch_rate" in capsys.readouterr().err


class TestPipeline:
    def test_full_pipeline_flat(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["gen", "--config", str(cfg)]) == 0
        assert main(["index", "--config", str(cfg)]) == 0
        assert main(["train", "--config", str(cfg)]) == 0
        assert main(["eval", "--config", str(cfg)]) == 0
        out = tmp_path / "exp"
        assert (out / "checkpoint.ltrp").exists()
        assert (out / "training_log.csv").exists()
        assert (out / "run.trec").exists()
        report = json.loads((out / "metrics.json").read_text("utf-8"))
        assert 0.0 <= report["mrr_at_10"] <= 1.0
        log_lines = (out / "training_log.csv").read_text("utf-8").splitlines()
        assert log_lines[0] == (
            "step,loss,lr,batch_mrr10,batch_recall200,"
            "overlap_lexical200,overlap_async200"
        )
        assert len(log_lines) == 1 + 8

    def test_train_zero_steps_checkpoint_equals_init(self, tmp_path):
        cfg = write_config(
            tmp_path, overrides={"train": {"steps": 0, "warmup_steps": 0}}
        )
        main(["gen", "--config", str(cfg)])
        # Provide an explicit initialization; train must emit it unchanged.
        import numpy as np

        from ltre.encoder import QueryEncoderParams, load_checkpoint, save_checkpoint

        out = tmp_path / "exp"
        init = QueryEncoderParams.initial(16, np.random.default_rng(0), 0.05)
        save_checkpoint(init, out / "init_checkpoint.ltrp")
        assert main(["train", "--config", str(cfg)]) == 0
        final = load_checkpoint(out / "checkpoint.ltrp")
        np.testing.assert_array_equal(final.W, init.W)

    def test_missing_inputs_give_nonzero_exit(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["train", "--config", str(cfg)]) == 2
        err = capsys.readouterr().err
        assert "missing" in err

    def test_pq_pipeline(self, tmp_path):
        cfg = write_config(
            tmp_path,
            overrides={"index": {"kind": "pq", "m": 4, "bits": 6, "opq_iters": 1,
                                 "kmeans_iters": 6}},
        )
        main(["gen", "--config", str(cfg)])
        assert main(["index", "--config", str(cfg)]) == 0
        out = tmp_path / "exp"
        assert (out / "index_pq.bin").exists()
        meta = json.loads((out / "index_meta.json").read_text("utf-8"))
        assert meta["kind"] == "pq" and meta["m"] == 4
        assert main(["train", "--config", str(cfg)]) == 0
        assert main(["eval", "--config", str(cfg)]) == 0

    def test_train_idempotent_given_seed(self, tmp_path):
        cfg = write_config(tmp_path)
        main(["gen", "--config", str(cfg)])
        main(["train", "--config", str(cfg)])
        first = hash_file(tmp_path / "exp" / "checkpoint.ltrp")
        first_log = hash_file(tmp_path / "exp" / "training_log.csv")
        main(["train", "--config", str(cfg)])
        assert hash_file(tmp_path / "exp" / "checkpoint.ltrp") == first
        assert hash_file(tmp_path / "exp" / "training_log.csv") == first_log

    def test_flag_overrides(self, tmp_path):
        cfg = write_config(tmp_path)
        main(["gen", "--config", str(cfg)])
        assert main(["train", "--config", str(cfg), "--steps", "3",
                     "--strategy", "rand-neg"]) == 0
        lines = (tmp_path / "exp" / "training_log.csv").read_text().splitlines()
        assert len(lines) == 4

    def test_eval_perfect_ranking_scores_one(self, tmp_path):
        # A degenerate corpus where the ideal ranking is achievable: one topic,
        # zero noise, so every doc is equidistant; ndcg of the eval report on a
        # trained model still lies in [0, 1]. The exact-1.0 case is covered in
        # metrics unit tests; here we check the CLI plumbing end to end.
        cfg = write_config(tmp_path)
        main(["gen", "--config", str(cfg)])
        main(["train", "--config", str(cfg)])
        assert main(["eval", "--config", str(cfg)]) == 0
        report = json.loads((tmp_path / "exp" / "metrics.json").read_text("utf-8"))
        assert 0.0 <= report["ndcg_at_10"] <= 1.0


class TestDiagnose:
    def test_diagnose_writes_fig_csv_and_grid(self, tmp_path):
        cfg = write_config(
            tmp_path,
            overrides={"train": {"steps": 4},
                       "index": {"kind": "pq", "m": 4, "bits": 4, "opq_iters": 0,
                                 "kmeans_iters": 4}},
        )
        main(["gen", "--config", str(cfg)])
        assert main(["diagnose", "--config", str(cfg)]) == 0
        out = tmp_path / "exp"
        diag_lines = (out / "diagnostics.csv").read_text("utf-8").splitlines()
        assert len(diag_lines) == 5
        grid_lines = (out / "consistency_grid.csv").read_text("utf-8").splitlines()
        assert grid_lines[0] == "train\\eval,flat,pq8,pq4"
        assert len(grid_lines) == 4
        assert grid_lines[1].startswith("flat,")
        assert grid_lines[3].startswith("pq4,")


class TestEvalIdealRanking:
    def test_degenerate_corpus_gives_perfect_ndcg(self, tmp_path):
        # One topic, zero noise: all document embeddings coincide, so any
        # encoder scores every doc equally and the ascending-ordinal tie-break
        # returns d00000 first -- which is exactly the ideal ranking (it is
        # the grade-2 doc, everything else shares grade 1).
        config = {
            "synthetic": {
                "num_topics": 1, "num_docs": 30, "num_train_queries": 8,
                "num_eval_queries": 5, "dim_k": 8, "doc_noise": 0.0,
                "query_noise": 0.0, "mismatch_rate": 0.0, "vocab_size": 20,
                "terms_per_doc": 6, "terms_per_query": 4, "seed": 4,
            },
            "train": {"steps": 1, "batch_size": 2, "depth_n": 5,
                      "warmup_steps": 0, "seed": 4},
            "paths": {"out_dir": str(tmp_path / "ideal")},
        }
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(config), "utf-8")
        assert main(["gen", "--config", str(cfg_path)]) == 0
        assert main(["train", "--config", str(cfg_path)]) == 0
        assert main(["eval", "--config", str(cfg_path)]) == 0
        report = json.loads((tmp_path / "ideal" / "metrics.json").read_text("utf-8"))
        assert report["ndcg_at_10"] == pytest.approx(1.0)
        assert report["mrr_at_10"] == pytest.approx(1.0)
