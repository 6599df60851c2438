"""Transplanting weak-column updates between same-architecture models.

A WeakDelta is the per-layer difference of weak blocks between a tuned
quantized model and its base. Deltas are stored in ORIGINAL coordinates
(rows un-permuted, column indices mapped back through the reorder plan), so
they can be added onto an unmodified dense sibling directly, or onto a
quantized sibling that shares the same weak-column selection.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import MergeMismatchError
from .model import DenseModel
from .qmodel import QuantizedModel, model_fingerprint
from .quantizer import LAYOUT_STRUCTURED


@dataclass
class LayerDelta:
    indices: np.ndarray   # sorted weak columns, original coordinates
    delta: np.ndarray     # (OC, k), rows in original order


@dataclass
class WeakDelta:
    layers: dict[str, LayerDelta]
    k: int
    fingerprint: str
    plan_ref: str
    meta: dict = field(default_factory=dict)


def plan_digest(qm: QuantizedModel) -> str:
    h = hashlib.sha256()
    h.update(qm.plan.p_resid.perm.tobytes())
    for p in qm.plan.p_ffn:
        h.update(p.perm.tobytes())
    for ids in qm.plan.wo_irregular:
        h.update(np.asarray(ids, dtype=np.int64).tobytes())
    h.update(qm.reorder.encode())
    return h.hexdigest()[:16]


def layer_coordinate_maps(qm: QuantizedModel, name: str):
    """(row_perm, weak_original) for one quantized layer.

    row_perm maps the layer's stored row order to original rows
    (stored row r holds original row row_perm[r]); None means identity.
    weak_original lists the weak columns in original coordinates, aligned
    with the weak block's column order.
    """
    base = name.split(".")[-1]
    block = int(name.split(".")[0][1:])
    q = qm.blocks[block].layers[base]
    if qm.reorder == "ogr":
        row_perm = None
        if base in ("wo", "w_down"):
            row_perm = qm.plan.p_resid.perm
        elif base in ("w_up", "w_gate"):
            row_perm = qm.plan.p_ffn[block].perm
        if q.layout == LAYOUT_STRUCTURED:
            col_perm = (qm.plan.p_ffn[block].perm if base == "w_down"
                        else qm.plan.p_resid.perm)
            weak_original = col_perm[q.ic - q.k:]
        else:
            weak_original = q.weak_indices
        return row_perm, np.asarray(weak_original, dtype=np.int64)
    if q.input_perm is not None:  # online: columns permuted, rows untouched
        return None, np.asarray(q.input_perm[q.ic - q.k:], dtype=np.int64)
    return None, np.asarray(q.weak_indices, dtype=np.int64)


def _frozen_payloads_equal(a: QuantizedModel, b: QuantizedModel) -> bool:
    if a.fingerprint != b.fingerprint or a.reorder != b.reorder:
        return False
    if plan_digest(a) != plan_digest(b):
        return False
    for (an, aq), (_, bq) in zip(a.layer_items(), b.layer_items()):
        if (aq.packed != bq.packed
                or not np.array_equal(aq.scales, bq.scales)
                or not np.array_equal(aq.zeros, bq.zeros)
                or not np.array_equal(aq.weak_indices, bq.weak_indices)
                or aq.layout != bq.layout or aq.bits != bq.bits
                or aq.g != bq.g or aq.k != bq.k):
            return False
    if not np.array_equal(a.embedding, b.embedding):
        return False
    if not np.array_equal(a.head, b.head):
        return False
    for ab, bb in zip(a.blocks, b.blocks):
        if (not np.array_equal(ab.gain1, bb.gain1)
                or not np.array_equal(ab.gain2, bb.gain2)):
            return False
    return True


def extract_delta(tuned: QuantizedModel, base: QuantizedModel) -> WeakDelta:
    """Weak-block difference tuned - base, mapped to original coordinates.

    Every frozen component must be byte-identical between the two models;
    anything else means tuned is not a weak-column descendant of base.
    """
    if not _frozen_payloads_equal(tuned, base):
        raise MergeMismatchError(
            "tuned model is not a weak-column descendant of base"
            " (frozen components differ)")
    layers = {}
    base_layers = dict(base.layer_items())
    for name, qt in tuned.layer_items():
        qb = base_layers[name]
        d_local = (qt.weak.astype(np.float64)
                   - qb.weak.astype(np.float64)).astype(np.float32)
        row_perm, weak_orig = layer_coordinate_maps(tuned, name)
        if row_perm is not None:
            d_orig = np.empty_like(d_local)
            d_orig[row_perm, :] = d_local
        else:
            d_orig = d_local
        order = np.argsort(weak_orig)
        layers[name] = LayerDelta(indices=weak_orig[order],
                                  delta=np.ascontiguousarray(d_orig[:, order]))
    return WeakDelta(layers=layers, k=tuned.k,
                     fingerprint=tuned.fingerprint,
                     plan_ref=plan_digest(tuned),
                     meta={"reorder": tuned.reorder})


def _dense_weight(model: DenseModel, name: str) -> np.ndarray:
    base = name.split(".")[-1]
    block = int(name.split(".")[0][1:])
    return getattr(model.blocks[block], base)


def apply_to_dense(target: DenseModel, delta: WeakDelta) -> DenseModel:
    """Add the delta onto a full-precision model in original coordinates."""
    if model_fingerprint(target.config) != delta.fingerprint:
        raise MergeMismatchError("target architecture fingerprint mismatch")
    out = target.copy()
    for name, ld in delta.layers.items():
        w = _dense_weight(out, name)
        if ld.indices.size and (ld.indices[0] < 0
                                or ld.indices[-1] >= w.shape[1]):
            raise MergeMismatchError(f"{name}: delta index out of range")
        w[:, ld.indices] += ld.delta
    return out


def apply_to_quantized(target: QuantizedModel,
                       delta: WeakDelta) -> QuantizedModel:
    """Add the delta onto a quantized sibling's weak blocks.

    The sibling must have been quantized with the same weak-column selection
    (layer-by-layer identical original-coordinate index sets); there is no
    nearest-index fallback.
    """
    if target.fingerprint != delta.fingerprint:
        raise MergeMismatchError("target architecture fingerprint mismatch")
    out = target.copy()
    for name, ld in delta.layers.items():
        row_perm, weak_orig = layer_coordinate_maps(out, name)
        order = np.argsort(weak_orig)
        if not np.array_equal(weak_orig[order], ld.indices):
            raise MergeMismatchError(
                f"{name}: weak index sets differ between delta and target")
        d_orig = np.empty_like(ld.delta)
        d_orig[:, order] = ld.delta
        d_local = d_orig[row_perm, :] if row_perm is not None else d_orig
        q = out.blocks[int(name.split(".")[0][1:])].layers[name.split(".")[-1]]
        q.weak = q.weak + d_local
    return out
