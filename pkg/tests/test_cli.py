"""The command surface: exit codes, strict configs, artifacts, reproducibility."""

from __future__ import annotations

import csv
import json
from pathlib import Path

from bfpo.cli import main
from bfpo.errors import NumericError

POPULATION = {
    "n_users": 6,
    "vocab_size": 24,
    "overlap_lambda": 0.5,
    "samples_per_user": 20,
    "prompt_pool_size": 8,
    "seq_len": 5,
}

TRAIN = {
    "method": "cbpo",
    "epochs": 2,
    "batch_size_pos": 4,
    "learning_rate": 0.1,
    "beta": 0.1,
    "alpha": 0.3,
    "context_size": 4,
    "warmstart_epochs": 1,
}


def _write(path: Path, doc: dict) -> str:
    path.write_text(json.dumps(doc))
    return str(path)


def _generate(tmp_path: Path, seed: int = 5, out: str = "corpus", **pop_overrides) -> Path:
    population = {**POPULATION, **pop_overrides}
    cfg = _write(
        tmp_path / f"gen_{out}.json",
        {"schema_version": 1, "seed": seed, "out_dir": str(tmp_path / out),
         "population": population},
    )
    assert main(["generate", "--config", cfg]) == 0
    return tmp_path / out


def _train(tmp_path: Path, corpus: Path, out: str = "run", seed: int = 5,
           train_overrides: dict | None = None, dataset_overrides: dict | None = None) -> Path:
    train = {**TRAIN, **(train_overrides or {})}
    dataset = {"target_user": "u000", "ratio_x": 1.0, "grouping": "random",
               **(dataset_overrides or {})}
    cfg = _write(
        tmp_path / f"train_{out}.json",
        {"schema_version": 1, "seed": seed, "out_dir": str(tmp_path / out),
         "corpus_dir": str(corpus), "dataset": dataset, "train": train},
    )
    assert main(["train", "--config", cfg]) == 0
    return tmp_path / out


class TestGenerate:
    def test_writes_expected_line_count(self, tmp_path):
        out = _generate(tmp_path)
        lines = (out / "corpus.jsonl").read_text().splitlines()
        assert len(lines) == POPULATION["n_users"] * POPULATION["samples_per_user"]
        assert (out / "population_spec.json").exists()

    def test_rerun_is_byte_identical(self, tmp_path):
        a = _generate(tmp_path, out="c1")
        b = _generate(tmp_path, out="c2")
        assert (a / "corpus.jsonl").read_bytes() == (b / "corpus.jsonl").read_bytes()

    def test_invalid_overlap_exits_2(self, tmp_path):
        cfg = _write(
            tmp_path / "bad.json",
            {"schema_version": 1, "seed": 0, "out_dir": str(tmp_path / "o"),
             "population": {**POPULATION, "overlap_lambda": 1.5}},
        )
        assert main(["generate", "--config", cfg]) == 2

    def test_unknown_key_exits_2(self, tmp_path):
        cfg = _write(
            tmp_path / "bad.json",
            {"schema_version": 1, "seed": 0, "out_dir": str(tmp_path / "o"),
             "population": POPULATION, "extra": True},
        )
        assert main(["generate", "--config", cfg]) == 2

    def test_missing_schema_version_exits_2(self, tmp_path):
        cfg = _write(
            tmp_path / "bad.json",
            {"seed": 0, "out_dir": str(tmp_path / "o"), "population": POPULATION},
        )
        assert main(["generate", "--config", cfg]) == 2


class TestTrain:
    def test_artifacts_and_row_count(self, tmp_path):
        corpus = _generate(tmp_path)
        out = _train(tmp_path, corpus)
        with (out / "metrics.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        # 16 target train samples, batches of 4, 2 epochs.
        assert len(rows) == 8
        assert (out / "checkpoint.json").exists()

    def test_alpha_estimate_written(self, tmp_path):
        corpus = _generate(tmp_path)
        out = _train(tmp_path, corpus, out="est", train_overrides={"alpha": "estimate"})
        doc = json.loads((out / "alpha_estimate.json").read_text())
        assert 0.0 <= doc["alpha_hat"] <= 0.99
        assert doc["n_aux"] > 0

    def test_missing_corpus_exits_2(self, tmp_path):
        cfg = _write(
            tmp_path / "t.json",
            {"schema_version": 1, "seed": 0, "out_dir": str(tmp_path / "o"),
             "corpus_dir": str(tmp_path / "nowhere"),
             "dataset": {"target_user": "u000", "ratio_x": 1.0, "grouping": "random"},
             "train": TRAIN},
        )
        assert main(["train", "--config", cfg]) == 2

    def test_unknown_train_key_exits_2(self, tmp_path):
        corpus = _generate(tmp_path)
        cfg = _write(
            tmp_path / "t.json",
            {"schema_version": 1, "seed": 0, "out_dir": str(tmp_path / "o"),
             "corpus_dir": str(corpus),
             "dataset": {"target_user": "u000", "ratio_x": 1.0, "grouping": "random"},
             "train": {**TRAIN, "momentum": 0.9}},
        )
        assert main(["train", "--config", cfg]) == 2

    def test_bco_equals_cbpo_alpha_zero(self, tmp_path):
        """Reduction-equality run: the two methods' held-out NLL agree to 1e-9."""
        corpus = _generate(tmp_path)
        nll = {}
        for method in ("bco", "cbpo"):
            out = _train(tmp_path, corpus, out=f"red_{method}",
                         train_overrides={"method": method, "alpha": 0.0})
            eval_dir = tmp_path / f"red_{method}_eval"
            assert main([
                "evaluate", "--checkpoint", str(out / "checkpoint.json"),
                "--corpus", str(corpus), "--out", str(eval_dir),
            ]) == 0
            nll[method] = json.loads(
                (eval_dir / "eval_report.json").read_text()
            )["heldout_nll"]
        assert abs(nll["bco"] - nll["cbpo"]) < 1e-9

    def test_numeric_abort_writes_dump_and_exits_1(self, tmp_path, monkeypatch):
        corpus = _generate(tmp_path)
        import bfpo.cli as cli_mod

        def explode(*args, **kwargs):
            raise NumericError("boom", details={"step": 1, "pos": [], "aux": [],
                                                "pairs": [], "method": "cbpo",
                                                "epoch": 0})

        monkeypatch.setattr(cli_mod, "run", explode)
        cfg = _write(
            tmp_path / "t.json",
            {"schema_version": 1, "seed": 0, "out_dir": str(tmp_path / "crash"),
             "corpus_dir": str(corpus),
             "dataset": {"target_user": "u000", "ratio_x": 1.0, "grouping": "random"},
             "train": TRAIN},
        )
        assert main(["train", "--config", cfg]) == 1
        assert (tmp_path / "crash" / "diagnostic_dump.json").exists()


class TestEvaluate:
    def test_report_and_determinism(self, tmp_path):
        corpus = _generate(tmp_path)
        out = _train(tmp_path, corpus)
        e1, e2 = tmp_path / "e1", tmp_path / "e2"
        for e in (e1, e2):
            assert main([
                "evaluate", "--checkpoint", str(out / "checkpoint.json"),
                "--corpus", str(corpus), "--out", str(e),
            ]) == 0
        r1 = (e1 / "eval_report.json").read_bytes()
        assert r1 == (e2 / "eval_report.json").read_bytes()
        doc = json.loads(r1)
        assert 0.0 <= doc["pref_acc"] <= 1.0
        assert doc["target_user"] == "u000"

    def test_vocab_mismatch_exits_2(self, tmp_path):
        corpus = _generate(tmp_path)
        other = _generate(tmp_path, out="corpus32", vocab_size=32)
        out = _train(tmp_path, corpus)
        assert main([
            "evaluate", "--checkpoint", str(out / "checkpoint.json"),
            "--corpus", str(other),
        ]) == 2


class TestEstimateAlpha:
    def test_writes_estimate(self, tmp_path):
        corpus = _generate(tmp_path, seed=6)
        cfg = _write(
            tmp_path / "alpha.json",
            {"schema_version": 1, "seed": 6, "out_dir": str(tmp_path / "alpha_out"),
             "corpus_dir": str(corpus),
             "dataset": {"target_user": "u000", "ratio_x": 1.0, "grouping": "random"},
             "estimator": {"epochs": 40, "lr": 1.0}},
        )
        assert main(["estimate-alpha", "--config", cfg]) == 0
        doc = json.loads((tmp_path / "alpha_out" / "alpha_estimate.json").read_text())
        assert 0.0 <= doc["alpha_hat"] <= 0.99
        assert 0.0 < doc["c_hat"] <= 1.0


class TestSweep:
    def _sweep_cfg(self, tmp_path, corpus_unused, axis, grid, out, n_seeds=1,
                   delta_modes=None):
        doc = {
            "schema_version": 1,
            "seed": 3,
            "out_dir": str(tmp_path / out),
            "axis": axis,
            "grid": grid,
            "n_seeds": n_seeds,
            "population": POPULATION,
            "dataset": {"target_user": "u000", "ratio_x": 1.0, "grouping": "random"},
            "train": {**TRAIN, "epochs": 1},
        }
        if delta_modes is not None:
            doc["delta_modes"] = delta_modes
        return _write(tmp_path / f"sweep_{out}.json", doc)

    def test_alpha_axis_row_count(self, tmp_path):
        cfg = self._sweep_cfg(tmp_path, None, "alpha", [0.0, 0.5], "sw1", n_seeds=2)
        assert main(["sweep", "--config", cfg]) == 0
        with (tmp_path / "sw1" / "sweep.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4
        assert {r["value"] for r in rows} == {"0.0", "0.5"}
        assert all(r["config_hash"] for r in rows)

    def test_grouping_axis_emits_labels(self, tmp_path):
        cfg = self._sweep_cfg(tmp_path, None, "grouping", ["random", "unique"], "sw2")
        assert main(["sweep", "--config", cfg]) == 0
        with (tmp_path / "sw2" / "sweep.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert [r["grouping"] for r in rows] == ["random", "unique"]

    def test_ratio_axis_with_delta_modes(self, tmp_path):
        """The imbalance study: 3 ratios x 2 anchor modes x 1 seed = 6 rows."""
        cfg = self._sweep_cfg(
            tmp_path, None, "ratio_x", [0.5, 1.0, 1.5], "sw3",
            delta_modes=["ema", "batch"],
        )
        assert main(["sweep", "--config", cfg]) == 0
        with (tmp_path / "sw3" / "sweep.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 6
        assert {(r["value"], r["delta_mode"]) for r in rows} == {
            (v, m) for v in ("0.5", "1.0", "1.5") for m in ("ema", "batch")
        }

    def test_bad_axis_exits_2(self, tmp_path):
        cfg = self._sweep_cfg(tmp_path, None, "temperature", [1], "sw4")
        assert main(["sweep", "--config", cfg]) == 2

    def test_workers_match_serial(self, tmp_path):
        cfg1 = self._sweep_cfg(tmp_path, None, "alpha", [0.0, 0.5], "sw5")
        cfg2 = self._sweep_cfg(tmp_path, None, "alpha", [0.0, 0.5], "sw6")
        assert main(["sweep", "--config", cfg1]) == 0
        assert main(["sweep", "--config", cfg2, "--workers", "2"]) == 0
        assert (tmp_path / "sw5" / "sweep.csv").read_bytes() == (
            tmp_path / "sw6" / "sweep.csv"
        ).read_bytes()


class TestVerify:
    def test_fresh_install_passes(self, tmp_path):
        out = tmp_path / "verify"
        assert main(["verify", "--out", str(out), "--fd-cases", "3"]) == 0
        doc = json.loads((out / "verify_report.json").read_text())
        assert doc["all_passed"]
        names = {c["name"] for c in doc["checks"]}
        assert "pu_unbiasedness" in names
        assert "gradient_fd_cbpo" in names
        # One entry per registered property.
        assert len(doc["checks"]) == len(names)


class TestSeedOverride:
    def test_seed_flag_changes_corpus(self, tmp_path):
        cfg = _write(
            tmp_path / "g.json",
            {"schema_version": 1, "seed": 1, "out_dir": str(tmp_path / "s1"),
             "population": POPULATION},
        )
        assert main(["generate", "--config", cfg]) == 0
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "s2"),
                     "--seed", "2"]) == 0
        assert (tmp_path / "s1" / "corpus.jsonl").read_bytes() != (
            tmp_path / "s2" / "corpus.jsonl"
        ).read_bytes()
