"""Checkpoint container: round trips, error taxonomy, size accounting."""

import dataclasses
import os

import numpy as np
import pytest

from qeft.container import load_checkpoint, save_checkpoint
from qeft.errors import (
    BadMagicError, ChecksumError, TruncatedFileError, UnsupportedVersionError,
)
from qeft.merging import LayerDelta, WeakDelta, extract_delta
from qeft.model import named_params
from qeft.packing import row_bytes
from qeft.qmodel import model_fingerprint
from qeft.tuning import TuneConfig, finetune


@pytest.fixture(scope="module")
def quant_path(tmp_path_factory, small_quantized):
    path = tmp_path_factory.mktemp("ckpt") / "q.qeft"
    save_checkpoint(path, small_quantized)
    return path


class TestRoundTrips:
    def test_dense_bitwise(self, tmp_path, small_model):
        path = tmp_path / "dense.qeft"
        save_checkpoint(path, small_model)
        loaded = load_checkpoint(path)
        assert loaded.config == small_model.config
        for (n1, a), (_, b) in zip(named_params(small_model),
                                   named_params(loaded)):
            assert np.array_equal(a, b), n1

    def test_quantized_bitwise(self, quant_path, small_quantized):
        loaded = load_checkpoint(quant_path)
        for (n, q1), (_, q2) in zip(small_quantized.layer_items(),
                                    loaded.layer_items()):
            assert q1.packed == q2.packed, n
            assert np.array_equal(q1.scales, q2.scales)
            assert np.array_equal(q1.zeros, q2.zeros)
            assert np.array_equal(q1.weak, q2.weak)
            assert np.array_equal(q1.weak_indices, q2.weak_indices)
            assert (q1.layout, q1.bits, q1.g, q1.k) == \
                   (q2.layout, q2.bits, q2.g, q2.k)
        assert np.array_equal(small_quantized.plan.p_resid.perm,
                              loaded.plan.p_resid.perm)
        assert np.array_equal(small_quantized.gwc.resid_indices,
                              loaded.gwc.resid_indices)
        assert loaded.fingerprint == small_quantized.fingerprint

    def test_delta_round_trip(self, tmp_path, small_quantized, corpus_split):
        train_ids, _ = corpus_split
        tuned, _ = finetune(small_quantized, train_ids,
                            TuneConfig(steps=3, batch=2, grad_accum=1,
                                       seq_len=32, seed=1))
        delta = extract_delta(tuned, small_quantized)
        path = tmp_path / "d.qeft"
        save_checkpoint(path, delta)
        loaded = load_checkpoint(path)
        assert set(loaded.layers) == set(delta.layers)
        for name, ld in delta.layers.items():
            assert np.array_equal(loaded.layers[name].indices, ld.indices)
            assert np.array_equal(loaded.layers[name].delta, ld.delta)
        assert loaded.fingerprint == delta.fingerprint

    def test_save_is_reproducible(self, tmp_path, small_quantized):
        p1, p2 = tmp_path / "a.qeft", tmp_path / "b.qeft"
        save_checkpoint(p1, small_quantized)
        save_checkpoint(p2, small_quantized)
        assert open(p1, "rb").read() == open(p2, "rb").read()


class TestErrorTaxonomy:
    def test_bad_magic(self, tmp_path, quant_path):
        raw = bytearray(open(quant_path, "rb").read())
        raw[0] ^= 0xFF
        bad = tmp_path / "badmagic"
        bad.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            load_checkpoint(bad)

    def test_unsupported_version(self, tmp_path, quant_path):
        raw = bytearray(open(quant_path, "rb").read())
        raw[4] = 99
        bad = tmp_path / "badver"
        bad.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedVersionError):
            load_checkpoint(bad)

    def test_truncation(self, tmp_path, quant_path):
        raw = open(quant_path, "rb").read()
        bad = tmp_path / "trunc"
        bad.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(TruncatedFileError):
            load_checkpoint(bad)

    def test_checksum(self, tmp_path, quant_path):
        raw = bytearray(open(quant_path, "rb").read())
        raw[200] ^= 0x01
        bad = tmp_path / "badcrc"
        bad.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            load_checkpoint(bad)

    def test_not_a_container(self, tmp_path):
        bad = tmp_path / "junk"
        bad.write_bytes(b"zz")
        with pytest.raises(BadMagicError):
            load_checkpoint(bad)


class TestSizeAccounting:
    def test_quantized_file_size_matches_analytic(self, quant_path,
                                                  small_quantized):
        """Reconstruct the expected byte count from the format definition."""
        qm = small_quantized
        cfg = qm.config

        def rec(name, payload_len):
            return 2 + len(name.encode()) + 1 + 8 + payload_len

        def tensor(shape, itemsize):
            n = int(np.prod(shape)) if shape else 1
            return 1 + 4 * len(shape) + n * itemsize

        import json
        total = 4 + 2 + 1 + 4  # magic, version, kind, count
        total += rec("config", len(json.dumps(
            dataclasses.asdict(cfg), sort_keys=True)))
        meta = {"k": qm.k, "bits": qm.bits, "g": qm.g, "mode": qm.mode,
                "reorder": qm.reorder, "fingerprint": qm.fingerprint,
                "extra": qm.meta, "has_gwc": True}
        total += rec("meta", len(json.dumps(meta, sort_keys=True)))
        total += rec("embedding", tensor((cfg.vocab_size, cfg.d_model), 4))
        total += rec("final_gain", tensor((cfg.d_model,), 4))
        total += rec("head", tensor((cfg.vocab_size, cfg.d_model), 4))
        total += rec("plan.p_resid", tensor((cfg.d_model,), 8))
        for i in range(cfg.n_blocks):
            total += rec(f"plan.p_ffn.{i}", tensor((cfg.d_ff,), 8))
            total += rec(f"plan.wo.{i}", tensor((qm.k,), 8))
            total += rec(f"gwc.ffn.{i}", tensor((qm.k,), 8))
            total += rec(f"gwc.wo.{i}", tensor((qm.k,), 8))
        total += rec("gwc.resid", tensor((qm.k,), 8))
        total += rec("gwc.s_global", tensor((cfg.d_model,), 4))
        for i in range(cfg.n_blocks):
            total += rec(f"b{i}.gain1", tensor((cfg.d_model,), 4))
            total += rec(f"b{i}.gain2", tensor((cfg.d_model,), 4))
        for name, q in qm.layer_items():
            lm = {"oc": q.oc, "ic": q.ic, "k": q.k, "bits": q.bits,
                  "g": q.g, "layout": q.layout, "mode": q.mode,
                  "optq_fallback": q.optq_fallback, "has_input_perm": False}
            total += rec(name + ".meta", len(json.dumps(lm, sort_keys=True)))
            total += rec(name + ".packed", q.oc * row_bytes(q.m, q.bits))
            total += rec(name + ".scales", tensor((q.oc, q.n_groups), 4))
            total += rec(name + ".zeros", tensor((q.oc, q.n_groups), 4))
            total += rec(name + ".weak", tensor((q.oc, q.k), 4))
            total += rec(name + ".weak_indices", tensor((q.k,), 8))
        total += 4  # crc
        actual = os.path.getsize(quant_path)
        assert abs(actual - total) <= 0.02 * total


class TestFingerprint:
    def test_same_architecture_matches(self, small_model):
        cfg2 = dataclasses.replace(small_model.config, seed=99)
        assert model_fingerprint(small_model.config) == model_fingerprint(cfg2)

    def test_different_architecture_differs(self, small_model):
        cfg2 = dataclasses.replace(small_model.config, d_ff=128)
        assert model_fingerprint(small_model.config) != model_fingerprint(cfg2)
