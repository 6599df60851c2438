"""Curvature statistics and weak-column selection.

For a linear layer with input activations X (channels x tokens), the layer
Hessian is H = 2 X X^T; its diagonal lambda scores how much output error a
perturbation of each input channel costs. Local selection keeps the top-k
lambda channels per layer; global selection pools mean-normalized lambda
across every residual-fed layer so one shared channel set can be reordered
to the tail of the whole network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .model import (
    DenseModel, ForwardTrace, HEAD_NAME, backward_batch, cross_entropy_grad,
    dense_engine, forward_batch, sample_windows,
)

METRIC_LAMBDA_DW = "lambda_dw"      # lambda_j * ||dW[:, j]||^2
METRIC_LAMBDA_ONLY = "lambda_only"  # lambda_j alone (global selection)
METRIC_GRAD_SQ = "grad_sq"          # ||dL/dW[:, j]||^2, optionally / lambda_j


@dataclass
class HessianDiag:
    """Per-layer lambda vectors, averaged over calibration sequences."""
    lam: dict[str, np.ndarray]
    sample_count: int = 0


@dataclass
class SensitivityReport:
    scores: dict[str, np.ndarray]
    metric: str


def sensitivity_report(hd: "HessianDiag",
                       deltas: dict[str, np.ndarray] | None = None,
                       metric: str = METRIC_LAMBDA_ONLY) -> SensitivityReport:
    """Package per-layer channel scores under one metric tag.

    lambda_only uses the Hessian diagonal as-is; lambda_dw also needs the
    per-layer quantization perturbations.
    """
    if metric == METRIC_LAMBDA_ONLY:
        scores = {n: v.copy() for n, v in hd.lam.items()}
    elif metric == METRIC_LAMBDA_DW:
        if deltas is None:
            raise ShapeError("lambda_dw metric needs per-layer perturbations")
        scores = {n: column_sensitivity(hd.lam[n], dw)
                  for n, dw in deltas.items()}
    else:
        raise ShapeError(f"unknown sensitivity metric {metric!r}")
    for name, v in scores.items():
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ShapeError(f"layer {name}: scores must be finite and >= 0")
    return SensitivityReport(scores=scores, metric=metric)


@dataclass
class GlobalWeakColumns:
    k: int
    resid_indices: np.ndarray          # sorted, in d_model space
    ffn_indices: list[np.ndarray]      # per block, sorted, in d_ff space
    wo_indices: list[np.ndarray]       # per block, sorted, attention-out space
    s_global: np.ndarray


def accumulate_hessian_diag(trace: ForwardTrace,
                            running: HessianDiag | None = None) -> HessianDiag:
    """Fold one traced forward call into the running lambda average.

    Each sequence contributes 2 * sum_t X[j, t]^2 per layer; the stored value
    is the mean of those contributions over all sequences seen so far, so
    streaming accumulation matches a batch computation.
    """
    contrib = {}
    for name, x in trace.activations.items():
        contrib[name] = 2.0 * np.sum(x.astype(np.float64) ** 2, axis=1)
    if running is None:
        return HessianDiag(lam=contrib, sample_count=1)

    if set(running.lam) != set(contrib):
        raise ShapeError("trace layer set does not match running state")
    n = running.sample_count
    lam = {}
    for name, c in contrib.items():
        prev = running.lam[name]
        if prev.shape != c.shape:
            raise ShapeError(
                f"layer {name}: IC {c.shape[0]} does not match running"
                f" {prev.shape[0]}")
        lam[name] = (prev * n + c) / (n + 1)
    return HessianDiag(lam=lam, sample_count=n + 1)


@dataclass
class HessianFull:
    """Full 2*X*X^T averages per layer (needed for error compensation)."""
    h: dict[str, np.ndarray]
    sample_count: int = 0

    def diag(self) -> HessianDiag:
        return HessianDiag(
            lam={k: np.diagonal(v).copy() for k, v in self.h.items()},
            sample_count=self.sample_count)


def accumulate_hessian_full(trace: ForwardTrace,
                            running: HessianFull | None = None) -> HessianFull:
    contrib = {name: 2.0 * (x.astype(np.float64) @ x.astype(np.float64).T)
               for name, x in trace.activations.items()}
    if running is None:
        return HessianFull(h=contrib, sample_count=1)
    n = running.sample_count
    h = {name: (running.h[name] * n + c) / (n + 1)
         for name, c in contrib.items()}
    return HessianFull(h=h, sample_count=n + 1)


def column_sensitivity(lam: np.ndarray, delta_w: np.ndarray) -> np.ndarray:
    """Per-column quantization sensitivity: lambda_j * ||delta_w[:, j]||^2."""
    lam = np.asarray(lam, dtype=np.float64)
    delta_w = np.asarray(delta_w, dtype=np.float64)
    if delta_w.ndim != 2 or delta_w.shape[1] != lam.shape[0]:
        raise ShapeError(
            f"delta_w {delta_w.shape} incompatible with lambda {lam.shape}")
    return lam * np.sum(delta_w ** 2, axis=0)


def select_local_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties to the lower index, sorted."""
    scores = np.asarray(scores)
    if k > scores.shape[0]:
        raise ShapeError(f"k={k} exceeds {scores.shape[0]} channels")
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")  # stable => lower index wins
    return np.sort(order[:k]).astype(np.int64)


def select_global(hd: HessianDiag, k: int, *, n_blocks: int,
                  layer_order: list[str] | None = None) -> GlobalWeakColumns:
    """Pool per-layer lambda into one residual-space weak-column set.

    Every residual-fed layer adds its mean-normalized lambda at that layer's
    local top-k indices into a global score; the global top-k wins. The
    d_ff space gets the same treatment per block (only w_down reads it), and
    each wo keeps a purely local selection since its input order is fixed by
    head concatenation.
    """
    resid_layers = [n for n in hd.lam
                    if n == HEAD_NAME
                    or n.split(".")[-1] in ("wq", "wk", "wv", "w_up", "w_gate")]
    if layer_order is not None:
        resid_layers = [n for n in layer_order if n in resid_layers]
    if not resid_layers:
        raise ShapeError("no residual-fed layers in the Hessian diagonal")
    d = hd.lam[resid_layers[0]].shape[0]
    for n in resid_layers:
        if hd.lam[n].shape[0] != d:
            raise ShapeError(f"layer {n} IC {hd.lam[n].shape[0]} != {d}")

    s_global = np.zeros(d, dtype=np.float64)
    for name in resid_layers:
        lam = hd.lam[name].astype(np.float64)
        ids = select_local_topk(lam, k)
        mean = lam.mean()
        if mean > 0:
            s_global[ids] += lam[ids] / mean
    resid = select_local_topk(s_global, k)

    ffn, wo = [], []
    for i in range(n_blocks):
        lam_down = hd.lam.get(f"b{i}.w_down")
        lam_wo = hd.lam.get(f"b{i}.wo")
        if lam_down is None or lam_wo is None:
            raise ShapeError(f"block {i} layers missing from Hessian diagonal")
        # single layer reads each d_ff space, so pooling reduces to local top-k
        ffn.append(select_local_topk(lam_down, k))
        wo.append(select_local_topk(lam_wo, k))
    return GlobalWeakColumns(k=k, resid_indices=resid, ffn_indices=ffn,
                             wo_indices=wo, s_global=s_global)


# ---------------------------------------------------------------------------
# gradient-based channel metric (for cross-checking the lambda selection)

def gradient_column_metric(model: DenseModel, dataset, h: HessianDiag,
                           *, divide_by_h: bool = True) -> dict[str, np.ndarray]:
    """Per-layer channel scores ||dL/dW[:, i]||^2, optionally divided by h_i.

    dataset is (inputs, targets) token batches, shaped (n, T). Weight
    gradients are accumulated across the whole dataset at the current model
    point. Where h_i == 0 with a nonzero gradient the score is +inf.
    """
    inputs, targets = dataset
    em = dense_engine(model)
    acc: dict[str, np.ndarray] = {}
    logits, _, cache = forward_batch(em, np.asarray(inputs), want_cache=True)
    grads = backward_batch(em, cache,
                           cross_entropy_grad(logits, np.asarray(targets)))
    for name, _ in em.linear_ops():
        acc[name] = grads[name].astype(np.float64)

    scores = {}
    for name, g in acc.items():
        gsq = np.sum(g ** 2, axis=0)
        if divide_by_h:
            hi = h.lam[name].astype(np.float64)
            out = np.zeros_like(gsq)
            nz = hi > 0
            out[nz] = gsq[nz] / hi[nz]
            out[(~nz) & (gsq > 0)] = np.inf
            scores[name] = out
        else:
            scores[name] = gsq
    return scores


# ---------------------------------------------------------------------------
# calibration orchestration

def calibration_windows(ids, n_seq: int = 8, seq_len: int = 128, seed: int = 0):
    rng = np.random.default_rng(seed)
    inputs, _ = sample_windows(rng, np.asarray(ids), n_seq, seq_len)
    return inputs


def collect_calibration(model: DenseModel, ids, n_seq: int = 8,
                        seq_len: int = 128, seed: int = 0) -> HessianFull:
    """Trace calibration sequences and accumulate full layer Hessians."""
    em = dense_engine(model)
    windows = calibration_windows(ids, n_seq,
                                  min(seq_len, model.config.max_seq), seed)
    full = None
    for row in windows:
        _, trace, _ = forward_batch(em, row[None, :], want_trace=True)
        full = accumulate_hessian_full(trace, full)
    return full


# ---------------------------------------------------------------------------
# report file (one record per layer, plain text)

def write_report(path, hd: HessianDiag, gwc: GlobalWeakColumns,
                 metric: str = METRIC_LAMBDA_ONLY) -> None:
    """Human-readable calibration export consumed by quantize/ablate."""
    with open(path, "w") as fh:
        fh.write(f"qeft-calibration v1 metric={metric}"
                 f" samples={hd.sample_count} k={gwc.k}\n")
        fh.write("global resid " + " ".join(map(str, gwc.resid_indices)) + "\n")
        fh.write("global score "
                 + " ".join(f"{v:.9e}" for v in gwc.s_global) + "\n")
        for i, ids in enumerate(gwc.ffn_indices):
            fh.write(f"global ffn b{i} " + " ".join(map(str, ids)) + "\n")
        for i, ids in enumerate(gwc.wo_indices):
            fh.write(f"global wo b{i} " + " ".join(map(str, ids)) + "\n")
        for name in sorted(hd.lam):
            lam = hd.lam[name]
            fh.write(f"layer {name} ic={lam.shape[0]}\n")
            fh.write("lambda " + " ".join(f"{v:.9e}" for v in lam) + "\n")


def read_report(path):
    """Parse a calibration report back into (HessianDiag, GlobalWeakColumns)."""
    lam: dict[str, np.ndarray] = {}
    resid = None
    s_global = np.zeros(0)
    ffn: dict[int, np.ndarray] = {}
    wo: dict[int, np.ndarray] = {}
    k = 0
    samples = 0
    with open(path) as fh:
        header = fh.readline().split()
        if not header or header[0] != "qeft-calibration":
            raise ShapeError(f"{path} is not a calibration report")
        for kv in header[2:]:
            key, val = kv.split("=")
            if key == "samples":
                samples = int(val)
            elif key == "k":
                k = int(val)
        current = None
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "global":
                if parts[1] == "resid":
                    resid = np.array([int(v) for v in parts[2:]], dtype=np.int64)
                elif parts[1] == "score":
                    s_global = np.array([float(v) for v in parts[2:]])
                else:
                    ids = np.array([int(v) for v in parts[3:]], dtype=np.int64)
                    block = int(parts[2][1:])
                    (ffn if parts[1] == "ffn" else wo)[block] = ids
            elif parts[0] == "layer":
                current = parts[1]
            elif parts[0] == "lambda":
                lam[current] = np.array([float(v) for v in parts[1:]])
    hd = HessianDiag(lam=lam, sample_count=samples)
    n_blocks = len(ffn)
    gwc = GlobalWeakColumns(
        k=k, resid_indices=resid,
        ffn_indices=[ffn[i] for i in range(n_blocks)],
        wo_indices=[wo[i] for i in range(n_blocks)],
        s_global=s_global)
    return hd, gwc
