"""Binary checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  b"QEFT"
    version u16      currently 1
    kind    u8       1 = dense model, 2 = quantized model, 3 = weak delta
    count   u32      number of records
    records ...      see below
    crc32   u32      zlib CRC32 of every byte before this field

Record:

    name_len u16, name utf-8, rtype u8, payload_len u64, payload

    rtype 1: float32 tensor   payload = ndim u8, dims u32*, raw data
    rtype 2: int64 tensor     same tensor layout
    rtype 3: raw bytes        packed quantization codes
    rtype 4: json             utf-8 canonical (sorted keys)

The writer emits records in a fixed order, so identical objects produce
byte-identical files.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
import zlib

import numpy as np

from .calibration import GlobalWeakColumns
from .errors import (
    BadMagicError, ChecksumError, ShapeError, TruncatedFileError,
    UnsupportedVersionError,
)
from .merging import LayerDelta, WeakDelta
from .model import (BLOCK_LINEARS, DenseModel, ModelConfig, init_model,
                    named_params)
from .qmodel import QuantBlock, QuantizedModel
from .quantizer import QuantizedLinear
from .reorder import Permutation, ReorderPlan

MAGIC = b"QEFT"
VERSION = 1
KIND_DENSE = 1
KIND_QUANT = 2
KIND_DELTA = 3

_RT_F32 = 1
_RT_I64 = 2
_RT_BYTES = 3
_RT_JSON = 4

RECORD_HEADER_BYTES = 2 + 1 + 8  # + name length itself
TENSOR_HEADER_BYTES = 1          # ndim byte; + 4 per dim


def _tensor_payload(arr: np.ndarray, dtype) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=dtype)
    head = struct.pack("<B", arr.ndim) + b"".join(
        struct.pack("<I", d) for d in arr.shape)
    return head + arr.tobytes()


def _read_tensor(payload: bytes, dtype) -> np.ndarray:
    ndim = payload[0]
    dims = struct.unpack_from(f"<{ndim}I", payload, 1)
    off = 1 + 4 * ndim
    return np.frombuffer(payload[off:], dtype=dtype).reshape(dims).copy()


class _Writer:
    def __init__(self, kind: int):
        self.buf = io.BytesIO()
        self.buf.write(MAGIC)
        self.buf.write(struct.pack("<HB", VERSION, kind))
        self.count_pos = self.buf.tell()
        self.buf.write(struct.pack("<I", 0))
        self.count = 0

    def record(self, name: str, rtype: int, payload: bytes):
        nb = name.encode()
        self.buf.write(struct.pack("<H", len(nb)))
        self.buf.write(nb)
        self.buf.write(struct.pack("<BQ", rtype, len(payload)))
        self.buf.write(payload)
        self.count += 1

    def f32(self, name, arr):
        self.record(name, _RT_F32, _tensor_payload(arr, np.float32))

    def i64(self, name, arr):
        self.record(name, _RT_I64, _tensor_payload(arr, np.int64))

    def raw(self, name, data: bytes):
        self.record(name, _RT_BYTES, bytes(data))

    def json(self, name, obj):
        self.record(name, _RT_JSON,
                    json.dumps(obj, sort_keys=True).encode())

    def finish(self) -> bytes:
        body = bytearray(self.buf.getvalue())
        struct.pack_into("<I", body, self.count_pos, self.count)
        return bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))


def _parse(data: bytes):
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a QEFT container (bad magic)")
    if len(data) < 11 + 4:
        raise TruncatedFileError("file shorter than the fixed header")
    version, kind = struct.unpack_from("<HB", data, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"container version {version}")
    (count,) = struct.unpack_from("<I", data, 7)
    records = {}
    off = 11
    end = len(data) - 4
    for _ in range(count):
        if off + 2 > end:
            raise TruncatedFileError("record header past end of file")
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        if off + nlen + 9 > end:
            raise TruncatedFileError("record header past end of file")
        name = data[off:off + nlen].decode()
        off += nlen
        rtype, plen = struct.unpack_from("<BQ", data, off)
        off += 9
        if off + plen > end:
            raise TruncatedFileError(f"record {name} payload truncated")
        records[name] = (rtype, data[off:off + plen])
        off += plen
    if off != end:
        raise TruncatedFileError("trailing bytes after the last record")
    stored_crc = struct.unpack_from("<I", data, end)[0]
    if zlib.crc32(data[:end]) != stored_crc:
        raise ChecksumError("CRC32 mismatch")
    return kind, records


def _get(records, name, rtype):
    if name not in records:
        raise ShapeError(f"container is missing record {name!r}")
    rt, payload = records[name]
    if rt != rtype:
        raise ShapeError(f"record {name!r} has type {rt}, expected {rtype}")
    if rtype == _RT_F32:
        return _read_tensor(payload, np.float32)
    if rtype == _RT_I64:
        return _read_tensor(payload, np.int64)
    if rtype == _RT_JSON:
        return json.loads(payload.decode())
    return payload


# ---------------------------------------------------------------------------
# dense model

def _save_dense(model: DenseModel) -> bytes:
    w = _Writer(KIND_DENSE)
    w.json("config", dataclasses.asdict(model.config))
    for name, arr in named_params(model):
        w.f32(name, arr)
    return w.finish()


def _load_dense(records) -> DenseModel:
    cfg = ModelConfig(**_get(records, "config", _RT_JSON))
    model = init_model(cfg)
    for name, arr in named_params(model):
        arr[...] = _get(records, name, _RT_F32)
    return model


# ---------------------------------------------------------------------------
# quantized model

def _save_qlinear(w: _Writer, prefix: str, q: QuantizedLinear):
    w.json(prefix + ".meta", {
        "oc": q.oc, "ic": q.ic, "k": q.k, "bits": q.bits, "g": q.g,
        "layout": q.layout, "mode": q.mode,
        "optq_fallback": q.optq_fallback,
        "has_input_perm": q.input_perm is not None,
    })
    w.raw(prefix + ".packed", q.packed)
    w.f32(prefix + ".scales", q.scales)
    w.f32(prefix + ".zeros", q.zeros)
    w.f32(prefix + ".weak", q.weak)
    w.i64(prefix + ".weak_indices", q.weak_indices)
    if q.input_perm is not None:
        w.i64(prefix + ".input_perm", q.input_perm)


def _load_qlinear(records, prefix: str) -> QuantizedLinear:
    meta = _get(records, prefix + ".meta", _RT_JSON)
    perm = None
    if meta["has_input_perm"]:
        perm = _get(records, prefix + ".input_perm", _RT_I64)
    return QuantizedLinear(
        oc=meta["oc"], ic=meta["ic"], k=meta["k"], bits=meta["bits"],
        g=meta["g"], packed=bytes(_get(records, prefix + ".packed", _RT_BYTES)),
        scales=_get(records, prefix + ".scales", _RT_F32),
        zeros=_get(records, prefix + ".zeros", _RT_F32),
        weak=_get(records, prefix + ".weak", _RT_F32),
        weak_indices=_get(records, prefix + ".weak_indices", _RT_I64),
        layout=meta["layout"], mode=meta["mode"],
        optq_fallback=meta["optq_fallback"], input_perm=perm)


def _save_quant(qm: QuantizedModel) -> bytes:
    w = _Writer(KIND_QUANT)
    w.json("config", dataclasses.asdict(qm.config))
    w.json("meta", {
        "k": qm.k, "bits": qm.bits, "g": qm.g, "mode": qm.mode,
        "reorder": qm.reorder, "fingerprint": qm.fingerprint,
        "extra": qm.meta, "has_gwc": qm.gwc is not None,
    })
    w.f32("embedding", qm.embedding)
    w.f32("final_gain", qm.final_gain)
    w.f32("head", qm.head)
    w.i64("plan.p_resid", qm.plan.p_resid.perm)
    for i, p in enumerate(qm.plan.p_ffn):
        w.i64(f"plan.p_ffn.{i}", p.perm)
    for i, ids in enumerate(qm.plan.wo_irregular):
        w.i64(f"plan.wo.{i}", np.asarray(ids, dtype=np.int64))
    if qm.gwc is not None:
        w.i64("gwc.resid", qm.gwc.resid_indices)
        for i, ids in enumerate(qm.gwc.ffn_indices):
            w.i64(f"gwc.ffn.{i}", ids)
        for i, ids in enumerate(qm.gwc.wo_indices):
            w.i64(f"gwc.wo.{i}", ids)
        w.f32("gwc.s_global", qm.gwc.s_global)
    for i, b in enumerate(qm.blocks):
        w.f32(f"b{i}.gain1", b.gain1)
        w.f32(f"b{i}.gain2", b.gain2)
        for nm in BLOCK_LINEARS:
            _save_qlinear(w, f"b{i}.{nm}", b.layers[nm])
    return w.finish()


def _load_quant(records) -> QuantizedModel:
    cfg = ModelConfig(**_get(records, "config", _RT_JSON))
    meta = _get(records, "meta", _RT_JSON)
    plan = ReorderPlan(
        p_resid=Permutation(_get(records, "plan.p_resid", _RT_I64)),
        p_ffn=[Permutation(_get(records, f"plan.p_ffn.{i}", _RT_I64))
               for i in range(cfg.n_blocks)],
        wo_irregular=[_get(records, f"plan.wo.{i}", _RT_I64)
                      for i in range(cfg.n_blocks)])
    gwc = None
    if meta["has_gwc"]:
        gwc = GlobalWeakColumns(
            k=meta["k"],
            resid_indices=_get(records, "gwc.resid", _RT_I64),
            ffn_indices=[_get(records, f"gwc.ffn.{i}", _RT_I64)
                         for i in range(cfg.n_blocks)],
            wo_indices=[_get(records, f"gwc.wo.{i}", _RT_I64)
                        for i in range(cfg.n_blocks)],
            s_global=_get(records, "gwc.s_global", _RT_F32))
    blocks = []
    for i in range(cfg.n_blocks):
        blocks.append(QuantBlock(
            gain1=_get(records, f"b{i}.gain1", _RT_F32),
            gain2=_get(records, f"b{i}.gain2", _RT_F32),
            layers={nm: _load_qlinear(records, f"b{i}.{nm}")
                    for nm in BLOCK_LINEARS}))
    return QuantizedModel(
        config=cfg, embedding=_get(records, "embedding", _RT_F32),
        blocks=blocks, final_gain=_get(records, "final_gain", _RT_F32),
        head=_get(records, "head", _RT_F32), plan=plan, gwc=gwc,
        k=meta["k"], bits=meta["bits"], g=meta["g"], mode=meta["mode"],
        reorder=meta["reorder"], fingerprint=meta["fingerprint"],
        meta=meta["extra"])


# ---------------------------------------------------------------------------
# weak delta

def _save_delta(d: WeakDelta) -> bytes:
    w = _Writer(KIND_DELTA)
    w.json("meta", {"k": d.k, "fingerprint": d.fingerprint,
                    "plan_ref": d.plan_ref, "extra": d.meta,
                    "layers": sorted(d.layers)})
    for name in sorted(d.layers):
        w.i64(name + ".indices", d.layers[name].indices)
        w.f32(name + ".delta", d.layers[name].delta)
    return w.finish()


def _load_delta(records) -> WeakDelta:
    meta = _get(records, "meta", _RT_JSON)
    layers = {}
    for name in meta["layers"]:
        layers[name] = LayerDelta(
            indices=_get(records, name + ".indices", _RT_I64),
            delta=_get(records, name + ".delta", _RT_F32))
    return WeakDelta(layers=layers, k=meta["k"],
                     fingerprint=meta["fingerprint"],
                     plan_ref=meta["plan_ref"], meta=meta["extra"])


# ---------------------------------------------------------------------------
# public API

def save_checkpoint(path, obj) -> None:
    """Serialize a DenseModel, QuantizedModel, or WeakDelta to path."""
    if isinstance(obj, DenseModel):
        data = _save_dense(obj)
    elif isinstance(obj, QuantizedModel):
        data = _save_quant(obj)
    elif isinstance(obj, WeakDelta):
        data = _save_delta(obj)
    else:
        raise ShapeError(f"cannot serialize {type(obj).__name__}")
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path):
    """Load whatever save_checkpoint wrote; the file self-describes its kind."""
    with open(path, "rb") as fh:
        data = fh.read()
    kind, records = _parse(data)
    if kind == KIND_DENSE:
        return _load_dense(records)
    if kind == KIND_QUANT:
        return _load_quant(records)
    if kind == KIND_DELTA:
        return _load_delta(records)
    raise UnsupportedVersionError(f"unknown container kind {kind}")
