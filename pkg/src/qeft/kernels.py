"""Matrix-vector paths over the packed mixed-precision format.

Every path computes y = W_hat x for one activation vector:

  structured      codes unpacked and folded group-by-group (scale * partial
                  dot + zero * group sum), then the contiguous weak block;
                  input already in the layer's reordered channel order
  irregular       same core, but the quantized/weak input entries are
                  gathered from their scattered original positions first
  online_reorder  input arrives in original order and is permuted on the
                  fly, then the structured path runs
  reference       full dequantize, float64 multiply; the ground truth

KernelStats counters are analytic functions of the layer shape, not
measurements; only elapsed time is measured.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .model import forward_batch
from .qmodel import QuantizedModel, quant_engine
from .quantizer import (
    LAYOUT_IRREGULAR, LAYOUT_STRUCTURED, QuantizedLinear, group_slices,
)

PATH_STRUCTURED = "structured"
PATH_IRREGULAR = "irregular"
PATH_ONLINE = "online_reorder"
PATH_REFERENCE = "reference"


@dataclass
class KernelStats:
    elapsed_ns: int = 0
    bytes_read: int = 0
    fma: int = 0
    calls: int = 0
    path: str = ""

    def merge(self, other: "KernelStats") -> None:
        self.elapsed_ns += other.elapsed_ns
        self.bytes_read += other.bytes_read
        self.fma += other.fma
        self.calls += other.calls
        self.path = self.path or other.path


def analytic_bytes(q: QuantizedLinear) -> int:
    """Weight-side bytes one matvec must read: packed + group params + weak."""
    return (len(q.packed)
            + 2 * 4 * q.oc * q.n_groups   # scales + zeros, float32
            + 4 * q.oc * q.k)             # weak block, float32


def analytic_fmas(q: QuantizedLinear) -> int:
    """Multiply-accumulates: per-code, per-group fold (scale & zero), weak."""
    return q.oc * q.m + 2 * q.oc * q.n_groups + q.oc * q.k


def _grouped_accumulate(q: QuantizedLinear, xq: np.ndarray,
                        xw: np.ndarray) -> np.ndarray:
    codes = q.codes().astype(np.float32)
    y = np.zeros(q.oc, dtype=np.float32)
    for gi, (lo, hi) in enumerate(group_slices(q.m, q.g)):
        partial = codes[:, lo:hi] @ xq[lo:hi]
        y += q.scales[:, gi] * partial + q.zeros[:, gi] * np.float32(xq[lo:hi].sum())
    if q.k:
        y += q.weak @ xw
    return y


def _bump(stats: KernelStats | None, q: QuantizedLinear, t0: int,
          path: str) -> None:
    if stats is not None:
        stats.merge(KernelStats(
            elapsed_ns=time.perf_counter_ns() - t0,
            bytes_read=analytic_bytes(q), fma=analytic_fmas(q),
            calls=1, path=path))


def matvec_structured(q: QuantizedLinear, x: np.ndarray,
                      stats: KernelStats | None = None) -> np.ndarray:
    """Fused dequant-multiply for a structured layer; x in reordered order."""
    if q.layout != LAYOUT_STRUCTURED:
        raise ShapeError("matvec_structured requires a structured layout")
    x = np.asarray(x, dtype=np.float32)
    if x.shape != (q.ic,):
        raise ShapeError(f"x shape {x.shape} != ({q.ic},)")
    t0 = time.perf_counter_ns()
    y = _grouped_accumulate(q, x[:q.m], x[q.m:])
    _bump(stats, q, t0, PATH_STRUCTURED)
    return y


def matvec_irregular(q: QuantizedLinear, x: np.ndarray,
                     stats: KernelStats | None = None) -> np.ndarray:
    """Mixed-precision matvec with weak columns at original positions."""
    if q.layout != LAYOUT_IRREGULAR:
        raise ShapeError("matvec_irregular requires an irregular layout")
    x = np.asarray(x, dtype=np.float32)
    if x.shape != (q.ic,):
        raise ShapeError(f"x shape {x.shape} != ({q.ic},)")
    t0 = time.perf_counter_ns()
    y = _grouped_accumulate(q, x[q.quant_positions()], x[q.weak_indices])
    _bump(stats, q, t0, PATH_IRREGULAR)
    return y


def matvec_online_reorder(q: QuantizedLinear, x_original: np.ndarray, perm,
                          stats: KernelStats | None = None) -> np.ndarray:
    """Permute an original-order input at run time, then run structured."""
    perm = np.asarray(getattr(perm, "perm", perm), dtype=np.int64)
    x_original = np.asarray(x_original, dtype=np.float32)
    if perm.shape != (q.ic,):
        raise ShapeError("permutation does not match layer input width")
    t0 = time.perf_counter_ns()
    y = _grouped_accumulate(q, x_original[perm[:q.m]],
                            x_original[perm[q.m:]])
    _bump(stats, q, t0, PATH_ONLINE)
    return y


def matvec_reference(q: QuantizedLinear, x: np.ndarray) -> np.ndarray:
    """Dense float64 oracle over the fully dequantized matrix."""
    x = np.asarray(x, dtype=np.float64)
    if q.input_perm is not None:
        x = x[q.input_perm]
    return q.dequant_full().astype(np.float64) @ x


def native_path(q: QuantizedLinear) -> str:
    if q.input_perm is not None:
        return PATH_ONLINE
    if q.layout == LAYOUT_STRUCTURED:
        return PATH_STRUCTURED
    return PATH_IRREGULAR


def matvec_dispatch(q: QuantizedLinear, x: np.ndarray,
                    stats: KernelStats | None = None,
                    path: str | None = None) -> np.ndarray:
    path = path or native_path(q)
    if path == PATH_REFERENCE:
        return matvec_reference(q, x).astype(np.float32)
    if path == PATH_ONLINE:
        return matvec_online_reorder(q, x, q.input_perm, stats)
    if path == PATH_STRUCTURED:
        return matvec_structured(q, x, stats)
    if path == PATH_IRREGULAR:
        return matvec_irregular(q, x, stats)
    raise ShapeError(f"unknown kernel path {path!r}")


# ---------------------------------------------------------------------------
# generation benchmark

class KernelPathOp:
    """Engine linear op that routes every activation column through a
    single-vector kernel path, collecting per-layer stats."""

    def __init__(self, name: str, q: QuantizedLinear,
                 stats_map: dict[str, KernelStats], reference: bool = False):
        self.name = name
        self.q = q
        self.oc, self.ic = q.oc, q.ic
        self.reference = reference
        self.stats = stats_map.setdefault(name, KernelStats())

    def apply(self, x2d: np.ndarray) -> np.ndarray:
        y = np.empty((self.oc, x2d.shape[1]), dtype=np.float32)
        path = PATH_REFERENCE if self.reference else None
        for j in range(x2d.shape[1]):
            y[:, j] = matvec_dispatch(self.q, x2d[:, j], self.stats, path)
        return y

    def forward_train(self, x2d):
        return self.apply(x2d), None

    def backward(self, state, dy2d, need_weight_grad=True):
        raise ShapeError("kernel-path ops are inference-only")


@dataclass
class GenerationResult:
    tokens: np.ndarray
    stats: dict[str, KernelStats]
    tokens_per_s: float
    elapsed_ns: int


def bench_generate(qm: QuantizedModel, prompt, n_tokens: int,
                   reference: bool = False, repeats: int = 1):
    """Greedy batch-1 generation; returns the median-throughput run.

    Without a KV cache the whole prefix is recomputed per step, every linear
    layer running column-by-column through its native kernel path.
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    cfg = qm.config
    if prompt.ndim != 1 or prompt.size == 0:
        raise ShapeError("prompt must be a nonempty 1-D token sequence")
    if prompt.size + n_tokens > cfg.max_seq:
        raise ShapeError(
            f"prompt ({prompt.size}) + n_tokens ({n_tokens}) exceeds"
            f" max_seq {cfg.max_seq}")
    runs = []
    for _ in range(max(1, repeats)):
        stats: dict[str, KernelStats] = {}
        em = quant_engine(qm, op_factory=lambda nm, q: KernelPathOp(
            nm, q, stats, reference=reference))
        toks = prompt.copy()
        t0 = time.perf_counter_ns()
        for _ in range(n_tokens):
            logits, _, _ = forward_batch(em, toks[None, :])
            toks = np.append(toks, int(np.argmax(logits[0, :, -1])))
        elapsed = time.perf_counter_ns() - t0
        tps = n_tokens / (elapsed / 1e9) if n_tokens and elapsed else 0.0
        runs.append(GenerationResult(
            tokens=toks[prompt.size:], stats=stats,
            tokens_per_s=tps, elapsed_ns=elapsed))
    runs.sort(key=lambda r: r.tokens_per_s)
    return runs[len(runs) // 2]
