"""Weak-column fine-tuning of a quantized model.

The quantized codes, group parameters, embedding, norm gains, and head are
all frozen; only the float32 weak-column blocks receive gradients. The
backward pass therefore stores just the k weak rows of each layer's input
activations, and the weight-gradient GEMM shrinks from OC x IC x T to
OC x k x T. CostCounters track both against their full-size equivalents, so
the k/IC claim is checkable exactly.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from .calibration import HessianDiag, gradient_column_metric, select_local_topk
from .errors import DivergenceError, ShapeError
from .model import (
    BLOCK_LINEARS, DenseModel, backward_batch, cross_entropy_with_grad,
    forward_batch, sample_windows,
)
from .qmodel import QuantizedModel, quant_engine
from .quantizer import QuantizedLinear


@dataclass
class TrainableLayerState:
    """Forward-pass remnants a quantized layer keeps for backward."""
    x_weak: np.ndarray   # (k, T) slice of the input, weak rows only
    n_cols: int


@dataclass
class CostCounters:
    """Exact FMA / element tallies for the weak-column backward."""
    wgrad_fma: int = 0
    full_fma: int = 0
    saved_elems: int = 0
    full_elems: int = 0

    def add(self, other: "CostCounters") -> None:
        self.wgrad_fma += other.wgrad_fma
        self.full_fma += other.full_fma
        self.saved_elems += other.saved_elems
        self.full_elems += other.full_elems


def qlinear_forward_train(q: QuantizedLinear, x: np.ndarray, *,
                          w_hat_dense: np.ndarray | None = None):
    """Forward through a quantized layer, saving only the weak input rows.

    Output matches the inference path exactly: the full dequantized matrix
    (with the current weak block) times x. Pass a cached w_hat_dense to skip
    re-dequantizing the frozen codes.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.shape[0] != q.ic:
        raise ShapeError(f"input rows {x.shape[0]} != IC {q.ic}")
    if q.input_perm is not None:
        x = x[q.input_perm]
    w_full = np.empty((q.oc, q.ic), dtype=np.float32)
    w_full[:, q.quant_positions()] = (
        w_hat_dense if w_hat_dense is not None else q.dequant_dense())
    w_full[:, q.weak_indices] = q.weak
    y = w_full @ x
    state = TrainableLayerState(
        x_weak=np.ascontiguousarray(x[q.weak_indices]), n_cols=x.shape[1])
    return y, state


def qlinear_backward(state: TrainableLayerState, dy: np.ndarray,
                     q: QuantizedLinear, *,
                     w_hat_dense: np.ndarray | None = None,
                     counters: CostCounters | None = None):
    """Input gradient through the full weight; weight gradient for weak only.

    dX uses the complete (dequantized + weak) matrix so gradients keep
    flowing to earlier layers; dW_weak = dY @ x_weak^T touches only the saved
    slice. Gradients for the quantized columns are never formed.
    """
    dy = np.asarray(dy, dtype=np.float32)
    t = state.n_cols
    if dy.shape != (q.oc, t):
        raise ShapeError(f"dY shape {dy.shape} != ({q.oc}, {t})")
    w_full = np.empty((q.oc, q.ic), dtype=np.float32)
    w_full[:, q.quant_positions()] = (
        w_hat_dense if w_hat_dense is not None else q.dequant_dense())
    w_full[:, q.weak_indices] = q.weak
    dx = w_full.T @ dy
    if q.input_perm is not None:
        undone = np.empty_like(dx)
        undone[q.input_perm] = dx
        dx = undone
    dw_weak = dy @ state.x_weak.T
    if counters is not None:
        counters.add(CostCounters(
            wgrad_fma=q.oc * q.k * t, full_fma=q.oc * q.ic * t,
            saved_elems=q.k * t, full_elems=q.ic * t))
    return dx, dw_weak


class QuantLinearTrainOp:
    """Engine adapter: frozen codes cached once, weak block trained live."""

    always_weight_grad = True

    def __init__(self, name: str, q: QuantizedLinear,
                 counters: CostCounters | None = None):
        self.name = name
        self.q = q
        self.oc, self.ic = q.oc, q.ic
        self.w_hat_dense = q.dequant_dense()
        self.counters = counters

    def apply(self, x2d):
        y, _ = qlinear_forward_train(self.q, x2d,
                                     w_hat_dense=self.w_hat_dense)
        return y

    def forward_train(self, x2d):
        return qlinear_forward_train(self.q, x2d,
                                     w_hat_dense=self.w_hat_dense)

    def backward(self, state, dy2d, need_weight_grad=True):
        return qlinear_backward(state, dy2d, self.q,
                                w_hat_dense=self.w_hat_dense,
                                counters=self.counters)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def like(cls, w: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(w), v=np.zeros_like(w))


def adam_step(state: AdamState, w: np.ndarray, grad: np.ndarray, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> np.ndarray:
    """Standard bias-corrected Adam update, applied in place to w."""
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient in adam_step")
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    mhat = state.m / (1.0 - beta1 ** state.step)
    vhat = state.v / (1.0 - beta2 ** state.step)
    w -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(w.dtype)
    return w


# ---------------------------------------------------------------------------
# fine-tuning loop

@dataclass
class TuneConfig:
    """Weak-column tuning defaults.

    Constant learning rate, scaled for the toy model: 5e-5 recovers
    quantization damage on the shipped corpus without dragging the model off
    the dense optimum (1e-3 and above measurably overshoot it at this scale).
    """
    steps: int = 200
    lr: float = 5e-5
    batch: int = 4
    grad_accum: int = 4
    max_grad_norm: float = 0.3
    seq_len: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    log_every: int = 25


def finetune(qm: QuantizedModel, dataset, config: TuneConfig | None = None):
    """Train the weak blocks of every quantized layer on next-byte prediction.

    Returns (tuned model, log). The log is one record per optimizer step:
    step, loss (mean over the accumulation group), grad_norm (pre-clip), and
    cumulative counters. Divergence raises DivergenceError carrying the last
    finite model.
    """
    cfg = config or TuneConfig()
    tuned = qm.copy()
    if cfg.steps == 0:
        return tuned, []
    t_start = time.perf_counter()
    ids = np.asarray(dataset)
    rng = np.random.default_rng(cfg.seed)
    counters = CostCounters()
    em = quant_engine(
        tuned, op_factory=lambda nm, q: QuantLinearTrainOp(nm, q, counters))
    weak = {name: q.weak for name, q in tuned.layer_items()}
    adam = {name: AdamState.like(w) for name, w in weak.items()}
    log = []

    for step in range(1, cfg.steps + 1):
        acc = {name: np.zeros_like(w) for name, w in weak.items()}
        loss_sum = 0.0
        for _ in range(cfg.grad_accum):
            xb, yb = sample_windows(rng, ids, cfg.batch, cfg.seq_len)
            logits, _, cache = forward_batch(em, xb, want_cache=True)
            loss, dlogits = cross_entropy_with_grad(logits, yb)
            if not math.isfinite(loss):
                # weak blocks hold the last finite update; snapshot them
                raise DivergenceError(
                    f"non-finite loss at step {step}",
                    last_good=tuned.copy(), step=step)
            loss_sum += loss
            grads = backward_batch(em, cache, dlogits, param_grads=False)
            for name in acc:
                acc[name] += grads[name]

        gnorm = 0.0
        for name in acc:
            acc[name] /= cfg.grad_accum
            gnorm += float(np.sum(acc[name].astype(np.float64) ** 2))
        gnorm = math.sqrt(gnorm)
        scale = 1.0
        if cfg.max_grad_norm and gnorm > cfg.max_grad_norm:
            scale = cfg.max_grad_norm / (gnorm + 1e-12)
        for name in acc:
            adam_step(adam[name], weak[name], acc[name] * scale, cfg.lr,
                      cfg.beta1, cfg.beta2, cfg.eps)

        if step % cfg.log_every == 0 or step == 1 or step == cfg.steps:
            log.append({
                "step": step, "loss": loss_sum / cfg.grad_accum,
                "grad_norm": gnorm,
                "elapsed_s": round(time.perf_counter() - t_start, 3),
                "wgrad_fma": counters.wgrad_fma,
                "full_fma": counters.full_fma,
                "saved_elems": counters.saved_elems,
                "full_elems": counters.full_elems,
            })
    return tuned, log


# ---------------------------------------------------------------------------
# channel-mask selection and its brute-force oracle

MASK_VARIANTS = ("grad_sq", "grad_sq_over_h")


def criterion_mask(model: DenseModel, dataset, h: HessianDiag, k: int,
                   variant: str = "grad_sq_over_h") -> dict[str, np.ndarray]:
    """Per-layer top-k channels by squared gradient column norm (optionally
    curvature-normalized), ties to the lower index."""
    if variant not in MASK_VARIANTS:
        raise ShapeError(f"variant must be one of {MASK_VARIANTS}")
    scores = gradient_column_metric(
        model, dataset, h, divide_by_h=(variant == "grad_sq_over_h"))
    return {name: select_local_topk(np.nan_to_num(s, posinf=np.finfo(np.float64).max), k)
            for name, s in scores.items()}


def mask_oracle_bruteforce(a: np.ndarray, targets: np.ndarray, k: int,
                           budget: int = 10_000):
    """Exhaustive channel-mask search on a quadratic least-squares instance.

    For every size-k column subset S of a (T x IC) design matrix, computes
    the exact infimum over updates supported on S of ||a @ d^T - targets||^2
    (closed-form least squares). Returns (best mask, {mask: loss}); ties go
    to the lexicographically smallest mask.
    """
    a = np.asarray(a, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    t, ic = a.shape
    if targets.shape[0] != t:
        raise ShapeError("targets rows must match design matrix rows")
    n_masks = math.comb(ic, k)
    if n_masks > budget:
        raise ShapeError(f"{n_masks} masks exceeds budget {budget}")

    table: dict[tuple, float] = {}
    best = None
    for mask in itertools.combinations(range(ic), k):
        asub = a[:, mask]
        sol, *_ = np.linalg.lstsq(asub, targets, rcond=None)
        loss = float(np.sum((asub @ sol - targets) ** 2))
        table[mask] = loss
        if best is None or loss < best[1] - 1e-12:
            best = (mask, loss)
    return best[0], table


def quadratic_criterion_scores(a: np.ndarray, resid: np.ndarray,
                               variant: str = "grad_sq_over_h") -> np.ndarray:
    """Channel scores of the gradient criterion on a quadratic instance.

    resid is (prediction - target) at the expansion point, shape (T, OC).
    The gradient column for channel i is 2 * resid^T a[:, i]; curvature
    h_i = 2 * sum_t a[t, i]^2.
    """
    a = np.asarray(a, dtype=np.float64)
    resid = np.asarray(resid, dtype=np.float64)
    grad = 2.0 * resid.T @ a                      # (OC, IC)
    gsq = np.sum(grad ** 2, axis=0)
    if variant == "grad_sq":
        return gsq
    h = 2.0 * np.sum(a ** 2, axis=0)
    out = np.zeros_like(gsq)
    nz = h > 0
    out[nz] = gsq[nz] / h[nz]
    out[(~nz) & (gsq > 0)] = np.inf
    return out
