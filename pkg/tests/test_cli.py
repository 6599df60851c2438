"""CLI surface: pipeline smoke, exit codes, report shapes, reproducibility."""

import csv
import json
import os

import numpy as np
import pytest

from qeft.cli import (
    EXIT_BAD_CHECKPOINT, EXIT_MISMATCH, EXIT_MISSING, EXIT_OK, main,
)
from qeft.container import load_checkpoint, save_checkpoint


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, small_model, small_quantized):
    """Dense and quantized checkpoints the commands operate on."""
    root = tmp_path_factory.mktemp("cli")
    save_checkpoint(root / "dense.qeft", small_model)
    save_checkpoint(root / "q.qeft", small_quantized)
    return root


def run(*argv):
    return main([str(a) for a in argv])


class TestPipeline:
    def test_calibrate(self, workdir):
        out = workdir / "calib.txt"
        assert run("calibrate", "--model", workdir / "dense.qeft",
                   "--k", "4", "--n-seq", "4", "--seq-len", "32",
                   "--out", out) == EXIT_OK
        assert out.exists()
        head = out.read_text().splitlines()[0]
        assert head.startswith("qeft-calibration")

    def test_reorder_writes_plan(self, workdir):
        out = workdir / "reordered.qeft"
        plan = workdir / "plan.json"
        assert run("reorder", "--model", workdir / "dense.qeft", "--k", "4",
                   "--out", out, "--plan-out", plan) == EXIT_OK
        loaded = json.loads(plan.read_text())
        assert sorted(loaded) == ["p_ffn", "p_resid", "wo_irregular"]
        assert sorted(loaded["p_resid"]) == list(range(32))

    def test_quantize_and_finetune(self, workdir):
        q = workdir / "q2.qeft"
        assert run("quantize", "--model", workdir / "dense.qeft",
                   "--k", "4", "--group-size", "16", "--bits", "4",
                   "--out", q) == EXIT_OK
        tuned = workdir / "tuned.qeft"
        log = workdir / "tune.jsonl"
        assert run("finetune", "--model", q, "--steps", "3", "--batch", "2",
                   "--grad-accum", "1", "--out", tuned, "--log", log) == EXIT_OK
        recs = [json.loads(line) for line in log.read_text().splitlines()]
        assert all({"step", "loss", "grad_norm", "wgrad_fma"} <= set(r)
                   for r in recs)

    def test_quantize_consumes_calibration_report(self, workdir, tmp_path):
        # same windows as quantize's internal default calibration
        calib = tmp_path / "calib.txt"
        assert run("calibrate", "--model", workdir / "dense.qeft", "--k", "4",
                   "--n-seq", "8", "--seq-len", "128", "--seed", "0",
                   "--out", calib) == EXIT_OK
        a, b = tmp_path / "with.qeft", tmp_path / "without.qeft"
        assert run("quantize", "--model", workdir / "dense.qeft", "--k", "4",
                   "--group-size", "16", "--seed", "0", "--calibration",
                   calib, "--out", a) == EXIT_OK
        assert run("quantize", "--model", workdir / "dense.qeft", "--k", "4",
                   "--group-size", "16", "--seed", "0", "--out", b) == EXIT_OK
        # same seed derives the same selection, so the report changes nothing
        assert a.read_bytes() == b.read_bytes()
        # but a k mismatch between report and flags is refused
        assert run("quantize", "--model", workdir / "dense.qeft", "--k", "3",
                   "--group-size", "16", "--calibration", calib,
                   "--out", tmp_path / "x.qeft") == EXIT_MISMATCH

    def test_merge_round_trip(self, workdir, small_quantized, corpus_split):
        from qeft.merging import extract_delta
        from qeft.tuning import TuneConfig, finetune
        base = workdir / "base.qeft"
        save_checkpoint(base, small_quantized)
        tuned, _ = finetune(small_quantized, corpus_split[0],
                            TuneConfig(steps=3, batch=2, grad_accum=1,
                                       seq_len=32, seed=4))
        delta_path = workdir / "delta.qeft"
        save_checkpoint(delta_path, extract_delta(tuned, small_quantized))
        merged = workdir / "merged.qeft"
        assert run("merge", "--delta", delta_path, "--target", base,
                   "--target-kind", "quantized", "--out", merged) == EXIT_OK
        out = load_checkpoint(merged)
        for (n, qa), (_, qb) in zip(out.layer_items(), tuned.layer_items()):
            assert np.allclose(qa.weak, qb.weak, atol=1e-6)

    def test_bench_report(self, workdir):
        report = workdir / "bench.csv"
        assert run("bench", "--model", workdir / "q.qeft", "--tokens", "4",
                   "--repeats", "1", "--prompt-len", "4",
                   "--report", report) == EXIT_OK
        rows = list(csv.DictReader(report.open()))
        assert {r["path"] for r in rows} == {"structured", "reference"}

    def test_eval_reports_three_variants(self, workdir):
        report = workdir / "eval.csv"
        assert run("eval", "--model", workdir / "dense.qeft", "--k", "4",
                   "--group-size", "16", "--report", report) == EXIT_OK
        rows = list(csv.DictReader(report.open()))
        assert [r["variant"] for r in rows] == ["dense", "rtn", "qeft"]
        for r in rows:
            assert float(r["ppl"]) > 0

    def test_eval_lossless_quantization_matches_dense(self, tmp_path):
        """A model whose rows are two-level with power-of-two spacing is
        exactly representable on every 4-bit grid (any regrouping included),
        so rtn/qeft perplexity must equal the dense perplexity."""
        from qeft.model import init_model
        from .conftest import SMALL_CONFIG
        import numpy as np
        m = init_model(SMALL_CONFIG)
        rng = np.random.default_rng(0)
        for i, b in enumerate(m.blocks):
            for nm in ("wq", "wk", "wv", "wo", "w_up", "w_gate", "w_down"):
                w = getattr(b, nm)
                base = ((np.arange(w.shape[0]) % 7 - 3) / 64.0)[:, None]
                bits = rng.integers(0, 2, size=w.shape)
                w[...] = (base + bits * (15.0 / 64.0)).astype(np.float32)
        path = tmp_path / "grid_exact.qeft"
        save_checkpoint(path, m)
        report = tmp_path / "eval.csv"
        assert run("eval", "--model", path, "--k", "8", "--group-size", "16",
                   "--report", report) == EXIT_OK
        rows = {r["variant"]: float(r["ppl"])
                for r in csv.DictReader(report.open())}
        assert abs(rows["qeft"] - rows["dense"]) <= 1e-4 * rows["dense"]
        assert abs(rows["rtn"] - rows["dense"]) <= 1e-4 * rows["dense"]

    def test_bench_incompatible_path_rejected(self, workdir):
        assert run("bench", "--model", workdir / "q.qeft",
                   "--path", "irregular", "--tokens", "2",
                   "--repeats", "1") == EXIT_MISMATCH

    def test_ablate_grid_shape(self, workdir):
        report = workdir / "ablate.csv"
        assert run("ablate", "--model", workdir / "dense.qeft", "--k", "4",
                   "--group-size", "16", "--mode", "rtn", "--tokens", "4",
                   "--repeats", "1", "--report", report) == EXIT_OK
        lines = report.read_text().strip().splitlines()
        assert len(lines) == 7  # header + full 2x3 grid
        rows = list(csv.DictReader(report.open()))
        assert [(r["reorder"], r["groupwise"]) for r in rows] == [
            ("none", "no"), ("none", "yes"), ("online", "no"),
            ("online", "yes"), ("ogr", "no"), ("ogr", "yes")]


class TestExitCodes:
    def test_missing_file(self, workdir):
        assert run("quantize", "--model", workdir / "nope.qeft",
                   "--out", workdir / "x.qeft") == EXIT_MISSING

    def test_corrupt_checkpoint(self, workdir):
        bad = workdir / "corrupt.qeft"
        bad.write_bytes(open(workdir / "q.qeft", "rb").read()[:64])
        assert run("finetune", "--model", bad, "--steps", "1",
                   "--out", workdir / "x.qeft") == EXIT_BAD_CHECKPOINT

    def test_k_mismatch(self, workdir):
        assert run("finetune", "--model", workdir / "q.qeft", "--steps", "1",
                   "--k", "9", "--out", workdir / "x.qeft") == EXIT_MISMATCH

    def test_wrong_checkpoint_kind(self, workdir):
        assert run("finetune", "--model", workdir / "dense.qeft",
                   "--steps", "1",
                   "--out", workdir / "x.qeft") == EXIT_MISMATCH

    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["bogus-command"])
        assert exc.value.code == 2


class TestReproducibility:
    def test_same_flags_same_bytes(self, workdir):
        a, b = workdir / "qa.qeft", workdir / "qb.qeft"
        for out in (a, b):
            assert run("quantize", "--model", workdir / "dense.qeft",
                       "--k", "4", "--group-size", "16", "--seed", "11",
                       "--out", out) == EXIT_OK
        assert a.read_bytes() == b.read_bytes()

    def test_env_seed_override(self, workdir, monkeypatch):
        a, b = workdir / "qc.qeft", workdir / "qd.qeft"
        monkeypatch.setenv("QEFT_SEED", "13")
        assert run("quantize", "--model", workdir / "dense.qeft",
                   "--k", "4", "--group-size", "16", "--out", a) == EXIT_OK
        monkeypatch.delenv("QEFT_SEED")
        assert run("quantize", "--model", workdir / "dense.qeft",
                   "--k", "4", "--group-size", "16", "--seed", "13",
                   "--out", b) == EXIT_OK
        assert a.read_bytes() == b.read_bytes()

    def test_config_file_supplies_defaults_flags_win(self, workdir, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"k": 4, "group-size": 16, "seed": 11}))
        a, b = tmp_path / "a.qeft", tmp_path / "b.qeft"
        assert run("quantize", "--model", workdir / "dense.qeft",
                   "--config", cfg, "--out", a) == EXIT_OK
        assert run("quantize", "--model", workdir / "dense.qeft",
                   "--k", "4", "--group-size", "16", "--seed", "11",
                   "--out", b) == EXIT_OK
        assert a.read_bytes() == b.read_bytes()
        # explicit flag beats the config value
        c = tmp_path / "c.qeft"
        cfg2 = tmp_path / "cfg2.json"
        cfg2.write_text(json.dumps({"k": 2, "group-size": 16, "seed": 11}))
        assert run("quantize", "--model", workdir / "dense.qeft",
                   "--config", cfg2, "--k", "4", "--out", c) == EXIT_OK
        assert c.read_bytes() == b.read_bytes()

    def test_inputs_not_mutated(self, workdir):
        before = (workdir / "dense.qeft").read_bytes()
        run("quantize", "--model", workdir / "dense.qeft", "--k", "4",
            "--group-size", "16", "--out", workdir / "x.qeft")
        assert (workdir / "dense.qeft").read_bytes() == before
