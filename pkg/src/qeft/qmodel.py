"""Whole-model quantization: pipeline, container type, and inference engine.

A quantized model keeps float32 embedding, norm gains, and head; every block
linear becomes a QuantizedLinear. Three arrangements are supported:

  ogr     offline global reordering: one shared weak-column set, physically
          permuted to the tail of every reorderable axis; wo stays irregular
  online  per-layer local selection; each layer's weights are pre-permuted to
          a structured split and its input is permuted at run time
  none    per-layer local selection, irregular mixed-precision layout
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .calibration import (
    GlobalWeakColumns, HessianFull, select_global, select_local_topk,
)
from .errors import ConfigError
from .model import (
    BLOCK_LINEARS, DenseModel, EngineBlock, EngineModel, HEAD_NAME,
    ModelConfig, eval_perplexity,
)
from .quantizer import (
    LAYOUT_IRREGULAR, LAYOUT_STRUCTURED, QuantizedLinear, quantize_layer,
)
from .reorder import (
    Permutation, ReorderPlan, apply_ogr, build_plan, identity_plan,
    permute_hessian, weak_to_tail,
)

REORDER_MODES = ("ogr", "online", "none")


@dataclass
class QuantBlock:
    gain1: np.ndarray
    gain2: np.ndarray
    layers: dict[str, QuantizedLinear]  # keyed by wq/wk/wv/wo/w_up/w_gate/w_down


@dataclass
class QuantizedModel:
    config: ModelConfig
    embedding: np.ndarray
    blocks: list[QuantBlock]
    final_gain: np.ndarray
    head: np.ndarray
    plan: ReorderPlan
    gwc: GlobalWeakColumns | None
    k: int
    bits: int
    g: int
    mode: str
    reorder: str
    fingerprint: str
    meta: dict = field(default_factory=dict)

    def layer_items(self):
        for i, b in enumerate(self.blocks):
            for nm in BLOCK_LINEARS:
                yield f"b{i}.{nm}", b.layers[nm]

    def copy(self) -> "QuantizedModel":
        import copy as _copy
        return _copy.deepcopy(self)


def model_fingerprint(config: ModelConfig) -> str:
    """Architecture hash; same-shape models match regardless of weights."""
    arch = {f: getattr(config, f) for f in
            ("d_model", "n_heads", "head_dim", "d_ff", "n_blocks",
             "vocab_size", "max_seq")}
    return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]


def quantize_model(dense: DenseModel, hess: HessianFull, *, k: int = 8,
                   bits: int = 4, g: int | None = 32, mode: str = "optq",
                   reorder: str = "ogr", grid_steps: int = 100,
                   alpha_min: float = 0.5,
                   gwc: GlobalWeakColumns | None = None,
                   plan: ReorderPlan | None = None,
                   meta: dict | None = None) -> QuantizedModel:
    """Quantize every block linear of the dense model.

    `hess` holds per-layer 2*X*X^T calibration averages in the original
    channel order; it is reindexed to follow whatever permutation each layer
    receives. Passing gwc/plan reuses a previous selection (required when a
    sibling model must share the exact weak-column layout).
    """
    cfg = dense.config
    if reorder not in REORDER_MODES:
        raise ConfigError(f"reorder must be one of {REORDER_MODES}")
    lam = hess.diag()

    if reorder == "ogr":
        if gwc is None:
            gwc = select_global(lam, k, n_blocks=cfg.n_blocks)
        if plan is None:
            plan = build_plan(gwc, cfg)
        src = apply_ogr(dense, plan)
    else:
        gwc = None
        plan = identity_plan(cfg)
        src = dense.copy()

    blocks = []
    for i, b in enumerate(src.blocks):
        layers = {}
        for nm in BLOCK_LINEARS:
            name = f"b{i}.{nm}"
            w = getattr(b, nm)
            h = hess.h[name]
            if reorder == "ogr":
                if nm == "wo":
                    layers[nm] = quantize_layer(
                        w, k=k, bits=bits, g=g or w.shape[1] - k, mode=mode,
                        layout=LAYOUT_IRREGULAR, indices=gwc.wo_indices[i],
                        h=h, grid_steps=grid_steps, alpha_min=alpha_min)
                else:
                    perm = plan.p_ffn[i] if nm == "w_down" else plan.p_resid
                    layers[nm] = quantize_layer(
                        w, k=k, bits=bits, g=g or w.shape[1] - k, mode=mode,
                        layout=LAYOUT_STRUCTURED,
                        h=permute_hessian(h, perm),
                        grid_steps=grid_steps, alpha_min=alpha_min)
            elif reorder == "online":
                local = select_local_topk(lam.lam[name], k)
                perm = weak_to_tail(w.shape[1], local)
                q = quantize_layer(
                    perm.apply_cols(w), k=k, bits=bits,
                    g=g or w.shape[1] - k, mode=mode,
                    layout=LAYOUT_STRUCTURED, h=permute_hessian(h, perm),
                    grid_steps=grid_steps, alpha_min=alpha_min)
                q.input_perm = perm.perm
                layers[nm] = q
            else:
                local = select_local_topk(lam.lam[name], k)
                layers[nm] = quantize_layer(
                    w, k=k, bits=bits, g=g or w.shape[1] - k, mode=mode,
                    layout=LAYOUT_IRREGULAR, indices=local, h=h,
                    grid_steps=grid_steps, alpha_min=alpha_min)
        blocks.append(QuantBlock(gain1=b.gain1.copy(), gain2=b.gain2.copy(),
                                 layers=layers))

    return QuantizedModel(
        config=cfg, embedding=src.embedding.copy(), blocks=blocks,
        final_gain=src.final_gain.copy(), head=src.head.copy(),
        plan=plan, gwc=gwc, k=k, bits=bits, g=(g if g is not None else -1),
        mode=mode, reorder=reorder, fingerprint=model_fingerprint(cfg),
        meta=dict(meta or {}))


# ---------------------------------------------------------------------------
# inference engine over quantized layers

class QuantLinearInferOp:
    """Frozen quantized linear: dequantize once, multiply as dense float32."""

    def __init__(self, name: str, q: QuantizedLinear):
        self.name = name
        self.q = q
        self.oc, self.ic = q.oc, q.ic
        self.w_hat = q.dequant_full()

    def apply(self, x2d: np.ndarray) -> np.ndarray:
        if self.q.input_perm is not None:
            x2d = x2d[self.q.input_perm]
        return self.w_hat @ x2d

    def forward_train(self, x2d):
        return self.apply(x2d), None

    def backward(self, state, dy2d, need_weight_grad=True):
        dx = self.w_hat.T @ dy2d
        if self.q.input_perm is not None:
            out = np.empty_like(dx)
            out[self.q.input_perm] = dx
            dx = out
        return dx, None


class FrozenDenseOp:
    """Float32 linear with no weight gradient (embedding-side of tuning)."""

    def __init__(self, name: str, weight: np.ndarray):
        self.name = name
        self.weight = weight
        self.oc, self.ic = weight.shape

    def apply(self, x2d):
        return self.weight @ x2d

    def forward_train(self, x2d):
        return self.weight @ x2d, None

    def backward(self, state, dy2d, need_weight_grad=True):
        return self.weight.T @ dy2d, None


def quant_engine(qm: QuantizedModel, op_factory=None) -> EngineModel:
    """EngineModel view of a quantized model.

    op_factory(name, q) -> linear op lets callers swap in training or
    kernel-path ops; the default is the cached-dequant inference op.
    """
    factory = op_factory or QuantLinearInferOp
    blocks = []
    for i, b in enumerate(qm.blocks):
        ops = {nm: factory(f"b{i}.{nm}", b.layers[nm]) for nm in BLOCK_LINEARS}
        blocks.append(EngineBlock(gain1=b.gain1, gain2=b.gain2, **ops))
    return EngineModel(
        config=qm.config, embedding=qm.embedding, blocks=blocks,
        final_gain=qm.final_gain, head=FrozenDenseOp(HEAD_NAME, qm.head))


def quantized_perplexity(qm: QuantizedModel, ids, seq_len: int = 128,
                         max_windows: int = 64):
    return eval_perplexity(quant_engine(qm), ids, seq_len, max_windows)
