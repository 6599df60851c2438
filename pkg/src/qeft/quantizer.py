"""Mixed-precision weight quantization for a single linear layer.

The dense majority of a weight matrix is stored as 3- or 4-bit codes with
asymmetric per-group (scale, zero) parameters along the input dimension; the
top-k most quantization-sensitive input columns (weak columns) stay float32
and bypass quantization entirely.

Group parameters come from a truncation grid search: the min-max range is
shrunk symmetrically around its midpoint by a factor alpha and the alpha with
the least squared weight error wins. Codes then come either from plain
nearest rounding ("rtn") or from greedy column-by-column rounding that pushes
each column's rounding error into the not-yet-quantized columns through the
inverse layer Hessian ("optq").
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .packing import pack_codes, unpack_codes

LAYOUT_STRUCTURED = "structured"
LAYOUT_IRREGULAR = "irregular"

GRID_STEPS_DEFAULT = 100
ALPHA_MIN_DEFAULT = 0.5
OPTQ_DAMP_FRAC = 0.01


@dataclass
class GroupParams:
    """Quantization parameters shared by one group of g row-adjacent weights."""
    scale: float
    zero: float
    g: int


@dataclass
class QuantizedLinear:
    oc: int
    ic: int
    k: int
    bits: int
    g: int
    packed: bytes                 # (oc, ic - k) codes, row-major
    scales: np.ndarray            # (oc, n_groups) float32
    zeros: np.ndarray             # (oc, n_groups) float32
    weak: np.ndarray              # (oc, k) float32
    weak_indices: np.ndarray      # sorted, in this layer's own column order
    layout: str
    mode: str = "optq"
    optq_fallback: bool = False
    input_perm: np.ndarray | None = None  # runtime reorder (online variant)

    @property
    def m(self) -> int:
        return self.ic - self.k

    @property
    def n_groups(self) -> int:
        return _n_groups(self.m, self.g)

    def codes(self) -> np.ndarray:
        return unpack_codes(self.packed, self.oc, self.m, self.bits)

    def quant_positions(self) -> np.ndarray:
        """Column indices of the quantized part, in this layer's own order.

        Computed once; the split is fixed when the layer is built.
        """
        cached = getattr(self, "_qpos", None)
        if cached is None or cached.shape[0] != self.m:
            mask = np.ones(self.ic, dtype=bool)
            mask[self.weak_indices] = False
            cached = np.flatnonzero(mask)
            object.__setattr__(self, "_qpos", cached)
        return cached

    def group_of(self, col: int) -> int:
        return min(col // self.g, self.n_groups - 1) if self.m else 0

    def dequant_dense(self) -> np.ndarray:
        """Dequantized (oc, m) matrix of the low-precision part."""
        c = self.codes().astype(np.float32)
        out = np.empty_like(c)
        for gi, (lo, hi) in enumerate(group_slices(self.m, self.g)):
            out[:, lo:hi] = (c[:, lo:hi] * self.scales[:, gi:gi + 1]
                             + self.zeros[:, gi:gi + 1])
        return out

    def dequant_full(self) -> np.ndarray:
        """Full (oc, ic) matrix with weak columns restored at their slots."""
        out = np.empty((self.oc, self.ic), dtype=np.float32)
        out[:, self.quant_positions()] = self.dequant_dense()
        out[:, self.weak_indices] = self.weak
        return out


def _n_groups(m: int, g: int) -> int:
    return max(1, math.ceil(m / g)) if m > 0 else 0


def group_slices(m: int, g: int):
    """(start, stop) pairs for each group along m columns; last may be ragged."""
    return [(lo, min(lo + g, m)) for lo in range(0, m, g)]


# ---------------------------------------------------------------------------
# per-group parameter search

def _minmax_params(w: np.ndarray, bits: int) -> GroupParams:
    wmin, wmax = float(w.min()), float(w.max())
    if wmax == wmin:
        return GroupParams(scale=1.0, zero=wmin, g=w.shape[-1])
    scale = (wmax - wmin) / (2 ** bits - 1)
    return GroupParams(scale=scale, zero=wmin, g=w.shape[-1])


def quantize_with_params(w: np.ndarray, params: GroupParams,
                         bits: int) -> np.ndarray:
    """Nearest code on the fixed grid dequant(c) = c*scale + zero."""
    c = np.rint((np.asarray(w, dtype=np.float64) - params.zero) / params.scale)
    return np.clip(c, 0, 2 ** bits - 1).astype(np.uint8)


def dequantize_codes(codes: np.ndarray, params: GroupParams) -> np.ndarray:
    return (codes.astype(np.float32) * np.float32(params.scale)
            + np.float32(params.zero))


def rtn_quantize_group(w: np.ndarray, bits: int):
    """Min-max asymmetric round-to-nearest for one weight group."""
    w = np.asarray(w, dtype=np.float32)
    if not np.all(np.isfinite(w)):
        raise ShapeError("non-finite weights in group")
    params = _minmax_params(w, bits)
    return quantize_with_params(w, params, bits), params


def grid_search_group_params(w: np.ndarray, bits: int,
                             grid_steps: int = GRID_STEPS_DEFAULT,
                             alpha_min: float = ALPHA_MIN_DEFAULT) -> GroupParams:
    """Pick the range-shrink factor alpha minimizing squared truncation error.

    The candidate grids clip the min-max range symmetrically around its
    midpoint by alpha in [alpha_min, 1.0]; alpha = 1.0 is always a candidate,
    so the result never loses to plain min-max. Larger alpha wins ties.
    """
    w = np.asarray(w, dtype=np.float64)
    if grid_steps < 1:
        raise ShapeError("grid_steps must be >= 1")
    wmin, wmax = float(w.min()), float(w.max())
    if wmax == wmin:
        return GroupParams(scale=1.0, zero=wmin, g=w.shape[-1])
    if grid_steps == 1:
        alphas = np.array([1.0])
    else:
        alphas = alpha_min + np.arange(grid_steps) * (1.0 - alpha_min) / (grid_steps - 1)
    mid = 0.5 * (wmin + wmax)
    levels = 2 ** bits - 1

    best = None
    for a in alphas:
        if a == 1.0:  # keep the min-max endpoints bit-exact
            lo, hi = wmin, wmax
        else:
            lo = mid - a * (mid - wmin)
            hi = mid + a * (wmax - mid)
        scale = (hi - lo) / levels
        c = np.clip(np.rint((w - lo) / scale), 0, levels)
        err = float(np.sum((w - (c * scale + lo)) ** 2))
        if best is None or err <= best[0]:
            best = (err, a, scale, lo)
    _, _, scale, lo = best
    return GroupParams(scale=float(scale), zero=float(lo), g=w.shape[-1])


def group_quant_error(w: np.ndarray, params: GroupParams, bits: int) -> float:
    c = quantize_with_params(w, params, bits)
    return float(np.sum((np.asarray(w, np.float64)
                         - (c * params.scale + params.zero)) ** 2))


# ---------------------------------------------------------------------------
# layer-level parameter search + rounding

def search_layer_params(w_dense: np.ndarray, bits: int, g: int, mode: str,
                        grid_steps: int = GRID_STEPS_DEFAULT,
                        alpha_min: float = ALPHA_MIN_DEFAULT):
    """Per-(row, group) params for the dense part: grid search or min-max."""
    oc, m = w_dense.shape
    ng = _n_groups(m, g)
    scales = np.empty((oc, ng), dtype=np.float32)
    zeros = np.empty((oc, ng), dtype=np.float32)
    for gi, (lo, hi) in enumerate(group_slices(m, g)):
        for r in range(oc):
            seg = w_dense[r, lo:hi]
            if mode == "rtn":
                p = _minmax_params(seg, bits)
            else:
                p = grid_search_group_params(seg, bits, grid_steps, alpha_min)
            scales[r, gi] = p.scale
            zeros[r, gi] = p.zero
    return scales, zeros


def _nearest_codes(w_dense, scales, zeros, g, bits):
    oc, m = w_dense.shape
    codes = np.empty((oc, m), dtype=np.uint8)
    for gi, (lo, hi) in enumerate(group_slices(m, g)):
        c = np.rint((w_dense[:, lo:hi].astype(np.float64)
                     - zeros[:, gi:gi + 1]) / scales[:, gi:gi + 1])
        codes[:, lo:hi] = np.clip(c, 0, 2 ** bits - 1).astype(np.uint8)
    return codes


def optq_quantize(w_dense: np.ndarray, h: np.ndarray, scales: np.ndarray,
                  zeros: np.ndarray, g: int, bits: int):
    """Greedy column rounding with inverse-Hessian error compensation.

    Columns are processed in natural ascending order. Each column is rounded
    to its pre-searched group grid; the rounding residual, scaled by the
    upper-Cholesky factor of H^-1, is subtracted from all later columns.
    Falls back to independent nearest rounding when the damped Hessian cannot
    be factorized; the caller gets (codes, used_fallback).
    """
    w = np.asarray(w_dense, dtype=np.float64).copy()
    oc, m = w.shape
    if h.shape != (m, m):
        raise ShapeError(f"Hessian {h.shape} does not match {m} columns")
    levels = 2 ** bits - 1

    hd = np.asarray(h, dtype=np.float64).copy()
    damp = OPTQ_DAMP_FRAC * float(np.mean(np.diagonal(hd)))
    hd[np.diag_indices(m)] += damp
    try:
        hinv = np.linalg.inv(hd)
        u = np.linalg.cholesky(hinv).T  # upper, H^-1 = U^T U
    except np.linalg.LinAlgError:
        return _nearest_codes(w_dense, scales, zeros, g, bits), True

    codes = np.empty((oc, m), dtype=np.uint8)
    sc = scales.astype(np.float64)
    zp = zeros.astype(np.float64)
    ng = sc.shape[1]
    for i in range(m):
        gi = min(i // g, ng - 1)
        col = w[:, i]
        c = np.clip(np.rint((col - zp[:, gi]) / sc[:, gi]), 0, levels)
        codes[:, i] = c.astype(np.uint8)
        dq = c * sc[:, gi] + zp[:, gi]
        err = (col - dq) / u[i, i]
        if i + 1 < m:
            w[:, i + 1:] -= np.outer(err, u[i, i + 1:])
    return codes, False


# ---------------------------------------------------------------------------
# whole-layer quantization

def quantize_layer(w: np.ndarray, *, k: int, bits: int, g: int,
                   mode: str = "optq", layout: str = LAYOUT_STRUCTURED,
                   lam: np.ndarray | None = None,
                   indices: np.ndarray | None = None,
                   x: np.ndarray | None = None,
                   h: np.ndarray | None = None,
                   grid_steps: int = GRID_STEPS_DEFAULT,
                   alpha_min: float = ALPHA_MIN_DEFAULT) -> QuantizedLinear:
    """Quantize one weight matrix into the mixed-precision layout.

    Weak columns are given by `indices`, or chosen as the top-k lambda
    channels; a structured layout requires them to be the trailing k columns
    (the matrix must already be reordered). optq mode needs the layer Hessian,
    either directly (`h`, IC x IC) or via calibration activations (`x`,
    IC x tokens).
    """
    w = np.asarray(w, dtype=np.float32)
    oc, ic = w.shape
    if k >= ic:
        raise ShapeError(f"k={k} must be < IC={ic}")
    if bits not in (3, 4):
        raise ShapeError(f"bits must be 3 or 4, got {bits}")
    if mode not in ("optq", "rtn"):
        raise ShapeError(f"unknown mode {mode!r}")

    if layout == LAYOUT_STRUCTURED:
        trailing = np.arange(ic - k, ic, dtype=np.int64)
        if indices is not None and not np.array_equal(
                np.sort(np.asarray(indices)), trailing):
            raise ShapeError("structured layout requires trailing weak columns")
        widx = trailing
    elif layout == LAYOUT_IRREGULAR:
        if indices is None:
            if lam is None:
                raise ShapeError("irregular layout needs indices or lambda")
            from .calibration import select_local_topk
            widx = select_local_topk(np.asarray(lam), k)
        else:
            widx = np.sort(np.asarray(indices, dtype=np.int64))
            if widx.size != k or (widx.size and
                                  (widx[0] < 0 or widx[-1] >= ic)):
                raise ShapeError("weak index set invalid for layer")
            if np.unique(widx).size != widx.size:
                raise ShapeError("duplicate weak indices")
    else:
        raise ShapeError(f"unknown layout {layout!r}")

    mask = np.ones(ic, dtype=bool)
    mask[widx] = False
    qpos = np.flatnonzero(mask)
    w_dense = w[:, qpos]
    m = w_dense.shape[1]
    g_eff = min(g, m) if m else g

    scales, zeros = search_layer_params(
        w_dense, bits, g_eff, mode, grid_steps, alpha_min)

    fallback = False
    if mode == "optq" and m > 0:
        if h is None:
            if x is None:
                raise ShapeError("optq mode needs calibration x or h")
            xs = np.asarray(x, dtype=np.float64)
            if xs.shape[0] != ic:
                raise ShapeError(
                    f"calibration rows {xs.shape[0]} != IC {ic}")
            h = 2.0 * xs @ xs.T
        hq = np.asarray(h, dtype=np.float64)[np.ix_(qpos, qpos)]
        codes, fallback = optq_quantize(w_dense, hq, scales, zeros,
                                        g_eff, bits)
    else:
        codes = _nearest_codes(w_dense, scales, zeros, g_eff, bits)

    return QuantizedLinear(
        oc=oc, ic=ic, k=k, bits=bits, g=g_eff,
        packed=pack_codes(codes, bits),
        scales=scales, zeros=zeros,
        weak=np.ascontiguousarray(w[:, widx]),
        weak_indices=widx, layout=layout, mode=mode,
        optq_fallback=fallback)


@dataclass
class LayerError:
    exact: float    # sum_i ||W_i X - What_i X||^2
    approx: float   # trace(dW (X X^T) dW^T)
    ratio: float


def layer_error(w: np.ndarray, q, x: np.ndarray) -> LayerError:
    """Output-space quantization error of a layer on calibration activations.

    `q` may be a QuantizedLinear or any dequantized (OC, IC) matrix.
    """
    w = np.asarray(w, dtype=np.float64)
    what = q.dequant_full() if isinstance(q, QuantizedLinear) else np.asarray(q)
    what = what.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    if what.shape != w.shape or x.shape[0] != w.shape[1]:
        raise ShapeError("layer_error shapes disagree")
    dw = w - what
    exact = float(np.sum((dw @ x) ** 2))
    approx = float(np.trace(dw @ (x @ x.T) @ dw.T))
    ratio = exact / approx if approx else (1.0 if exact == 0.0 else np.inf)
    return LayerError(exact=exact, approx=approx, ratio=ratio)
