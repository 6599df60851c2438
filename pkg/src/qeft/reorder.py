"""Offline global reordering of the dense model.

A single permutation of the residual channel space (plus one per-block
permutation of each d_ff space) moves the globally selected weak columns to
the tail of every reorderable axis, so the mixed-precision layout becomes a
contiguous split instead of scattered columns. The reordered model computes
exactly the same function: every permuted write is matched by a permuted
read, RMS-norm and attention are permutation-equivariant over the channel
axis, and wo's input axis (fixed by head concatenation) is left alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import GlobalWeakColumns
from .errors import ShapeError
from .model import DenseModel, ModelConfig


@dataclass
class Permutation:
    """Channel permutation; perm[new] = old."""
    perm: np.ndarray

    def __post_init__(self):
        self.perm = np.asarray(self.perm, dtype=np.int64)
        n = self.perm.shape[0]
        if not np.array_equal(np.sort(self.perm), np.arange(n)):
            raise ShapeError("permutation is not a bijection over [0, n)")

    @property
    def n(self) -> int:
        return self.perm.shape[0]

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.n)
        return Permutation(inv)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.perm, np.arange(self.n)))

    def apply_vec(self, x: np.ndarray) -> np.ndarray:
        return x[..., self.perm]

    def apply_rows(self, w: np.ndarray) -> np.ndarray:
        return w[self.perm, :]

    def apply_cols(self, w: np.ndarray) -> np.ndarray:
        return w[:, self.perm]


def weak_to_tail(n: int, weak: np.ndarray) -> Permutation:
    """Permutation sending `weak` to the trailing slots, orders preserved."""
    weak = np.sort(np.asarray(weak, dtype=np.int64))
    if weak.size and (weak[0] < 0 or weak[-1] >= n):
        raise ShapeError(f"weak index out of range for dimension {n}")
    mask = np.zeros(n, dtype=bool)
    mask[weak] = True
    return Permutation(np.concatenate([np.flatnonzero(~mask), weak]))


@dataclass
class ReorderPlan:
    p_resid: Permutation
    p_ffn: list[Permutation]
    wo_irregular: list[np.ndarray]  # per block, sorted weak sets for wo

    def is_identity(self) -> bool:
        return (self.p_resid.is_identity()
                and all(p.is_identity() for p in self.p_ffn))


def build_plan(gwc: GlobalWeakColumns, config: ModelConfig) -> ReorderPlan:
    """Plan moving the selected weak columns to each axis's tail."""
    return ReorderPlan(
        p_resid=weak_to_tail(config.d_model, gwc.resid_indices),
        p_ffn=[weak_to_tail(config.d_ff, ids) for ids in gwc.ffn_indices],
        wo_irregular=[np.sort(np.asarray(ids, dtype=np.int64))
                      for ids in gwc.wo_indices],
    )


def identity_plan(config: ModelConfig, wo_indices=None) -> ReorderPlan:
    return ReorderPlan(
        p_resid=Permutation(np.arange(config.d_model)),
        p_ffn=[Permutation(np.arange(config.d_ff))
               for _ in range(config.n_blocks)],
        wo_irregular=(wo_indices or
                      [np.zeros(0, dtype=np.int64)] * config.n_blocks),
    )


def apply_ogr(model: DenseModel, plan: ReorderPlan) -> DenseModel:
    """Permute the model's weights per the plan; the function is unchanged.

    Residual permutation touches: embedding columns, norm gains, the input
    columns of wq/wk/wv/w_up/w_gate/head, and the output rows of wo/w_down
    (the residual write side). Each block's d_ff permutation touches
    w_up/w_gate output rows and w_down input columns. wo input columns are
    never permuted.
    """
    cfg = model.config
    pr = plan.p_resid
    if pr.n != cfg.d_model or len(plan.p_ffn) != cfg.n_blocks:
        raise ShapeError("plan dimensions do not match the model")
    out = model.copy()
    out.embedding = pr.apply_cols(out.embedding)
    out.head = pr.apply_cols(out.head)
    out.final_gain = pr.apply_vec(out.final_gain)
    for i, b in enumerate(out.blocks):
        pf = plan.p_ffn[i]
        if pf.n != cfg.d_ff:
            raise ShapeError(f"block {i} ffn permutation size {pf.n}")
        b.gain1 = pr.apply_vec(b.gain1)
        b.gain2 = pr.apply_vec(b.gain2)
        b.wq = pr.apply_cols(b.wq)
        b.wk = pr.apply_cols(b.wk)
        b.wv = pr.apply_cols(b.wv)
        b.wo = pr.apply_rows(b.wo)
        b.w_up = pf.apply_rows(pr.apply_cols(b.w_up))
        b.w_gate = pf.apply_rows(pr.apply_cols(b.w_gate))
        b.w_down = pr.apply_rows(pf.apply_cols(b.w_down))
    return out


def invert_plan(plan: ReorderPlan) -> ReorderPlan:
    return ReorderPlan(
        p_resid=plan.p_resid.inverse(),
        p_ffn=[p.inverse() for p in plan.p_ffn],
        wo_irregular=plan.wo_irregular,
    )


def permute_hessian(h: np.ndarray, perm: Permutation) -> np.ndarray:
    """Reindex an IC x IC layer Hessian into the permuted channel order."""
    return h[np.ix_(perm.perm, perm.perm)]
