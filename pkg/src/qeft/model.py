"""Tiny decoder transformer: weights, forward/backward engine, and trainer.

The model is a Llama-style stack at desk scale: RMS-norm with learnable gain,
rotary position encoding inside attention, SwiGLU feed-forward, byte-level
vocabulary. All math is float32 numpy; the backward pass is written by hand so
the same engine can later run with quantized linear layers that only produce
weak-column weight gradients.

Orientation conventions, used everywhere in this package:
  * weights are row-major (output-channel, input-channel) float32 arrays
  * activations are (channels, tokens) matrices; batched tensors are
    (batch, channels, tokens)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DivergenceError, ShapeError

RMS_EPS = 1e-5
ROPE_BASE = 10000.0

# Per-block linear layers, in canonical order. Residual-fed layers read the
# d_model residual stream; w_down reads the d_ff intermediate; wo reads the
# concatenated attention head outputs (which is why it cannot be reordered).
BLOCK_LINEARS = ("wq", "wk", "wv", "wo", "w_up", "w_gate", "w_down")
RESID_BLOCK_LINEARS = ("wq", "wk", "wv", "w_up", "w_gate")
HEAD_NAME = "head"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    head_dim: int = 16
    d_ff: int = 256
    n_blocks: int = 4
    vocab_size: int = 256
    max_seq: int = 128
    seed: int = 0

    def validate(self) -> None:
        dims = {
            "d_model": self.d_model, "n_heads": self.n_heads,
            "head_dim": self.head_dim, "d_ff": self.d_ff,
            "n_blocks": self.n_blocks, "vocab_size": self.vocab_size,
            "max_seq": self.max_seq,
        }
        for name, v in dims.items():
            if v < 1:
                raise ConfigError(f"{name} must be >= 1, got {v}")
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(
                f"d_model ({self.d_model}) != n_heads ({self.n_heads})"
                f" * head_dim ({self.head_dim})")
        if self.d_ff < self.d_model:
            raise ConfigError(f"d_ff ({self.d_ff}) < d_model ({self.d_model})")
        if self.head_dim % 2 != 0:
            raise ConfigError("head_dim must be even (rotary pairs)")


DEFAULT_CONFIG = ModelConfig()


@dataclass
class BlockWeights:
    gain1: np.ndarray    # (d_model,)
    wq: np.ndarray       # (d_model, d_model)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray       # (d_model, d_model), input = concat head outputs
    gain2: np.ndarray
    w_up: np.ndarray     # (d_ff, d_model)
    w_gate: np.ndarray   # (d_ff, d_model)
    w_down: np.ndarray   # (d_model, d_ff)


@dataclass
class DenseModel:
    config: ModelConfig
    embedding: np.ndarray   # (vocab, d_model)
    blocks: list[BlockWeights]
    final_gain: np.ndarray  # (d_model,)
    head: np.ndarray        # (vocab, d_model)

    def copy(self) -> "DenseModel":
        return DenseModel(
            config=self.config,
            embedding=self.embedding.copy(),
            blocks=[replace(b, **{f: getattr(b, f).copy()
                                  for f in b.__dataclass_fields__})
                    for b in self.blocks],
            final_gain=self.final_gain.copy(),
            head=self.head.copy(),
        )


def named_params(model: DenseModel):
    """Yield (name, array) for every trainable tensor, in a fixed order."""
    yield "embedding", model.embedding
    for i, b in enumerate(model.blocks):
        yield f"b{i}.gain1", b.gain1
        for nm in ("wq", "wk", "wv", "wo"):
            yield f"b{i}.{nm}", getattr(b, nm)
        yield f"b{i}.gain2", b.gain2
        for nm in ("w_up", "w_gate", "w_down"):
            yield f"b{i}.{nm}", getattr(b, nm)
    yield "final_gain", model.final_gain
    yield HEAD_NAME, model.head


def linear_layer_names(config: ModelConfig) -> list[str]:
    """All quantizable linear layer names: block linears plus the head."""
    names = []
    for i in range(config.n_blocks):
        names.extend(f"b{i}.{nm}" for nm in BLOCK_LINEARS)
    names.append(HEAD_NAME)
    return names


def residual_layer_names(config: ModelConfig) -> list[str]:
    """Layers whose input is the shared residual stream (d_model channels)."""
    names = []
    for i in range(config.n_blocks):
        names.extend(f"b{i}.{nm}" for nm in RESID_BLOCK_LINEARS)
    names.append(HEAD_NAME)
    return names


def layer_input_dim(config: ModelConfig, name: str) -> int:
    base = name.split(".")[-1]
    if base == "w_down":
        return config.d_ff
    return config.d_model


def init_model(config: ModelConfig = DEFAULT_CONFIG) -> DenseModel:
    """Deterministic weight init from config.seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    d, ff, v = config.d_model, config.d_ff, config.vocab_size
    s_in = 1.0 / math.sqrt(d)
    s_ff = 1.0 / math.sqrt(ff)
    s_res = 1.0 / math.sqrt(2.0 * config.n_blocks)

    def mat(oc, ic, scale):
        return (rng.standard_normal((oc, ic)) * scale).astype(np.float32)

    blocks = []
    for _ in range(config.n_blocks):
        blocks.append(BlockWeights(
            gain1=np.ones(d, dtype=np.float32),
            wq=mat(d, d, s_in),
            wk=mat(d, d, s_in),
            wv=mat(d, d, s_in),
            wo=mat(d, d, s_in * s_res),
            gain2=np.ones(d, dtype=np.float32),
            w_up=mat(ff, d, s_in),
            w_gate=mat(ff, d, s_in),
            w_down=mat(d, ff, s_ff * s_res),
        ))
    return DenseModel(
        config=config,
        embedding=mat(v, d, s_in),
        blocks=blocks,
        final_gain=np.ones(d, dtype=np.float32),
        head=mat(v, d, s_in),
    )


# ---------------------------------------------------------------------------
# byte tokenizer

def encode_bytes(text) -> np.ndarray:
    """Byte-level tokenization: one token per byte, vocab 256."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    if isinstance(text, (bytes, bytearray)):
        return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)
    return np.asarray(text, dtype=np.int64)


def decode_bytes(ids) -> bytes:
    return bytes(np.asarray(ids, dtype=np.int64).astype(np.uint8).tolist())


# ---------------------------------------------------------------------------
# linear-layer ops
#
# The engine is generic over how a "linear layer" multiplies and
# differentiates, so the same forward/backward code runs the dense model, the
# quantized model at inference, and the quantized model under weak-column
# training. Activations arrive flattened to (IC, batch*tokens).

class DenseLinearOp:
    """Plain float32 linear layer; weight gradient covers the full matrix."""

    def __init__(self, name: str, weight: np.ndarray):
        self.name = name
        self.weight = weight
        self.oc, self.ic = weight.shape

    def apply(self, x2d: np.ndarray) -> np.ndarray:
        return self.weight @ x2d

    def forward_train(self, x2d: np.ndarray):
        return self.weight @ x2d, x2d

    def backward(self, state, dy2d: np.ndarray, need_weight_grad: bool = True):
        dx = self.weight.T @ dy2d
        dw = dy2d @ state.T if need_weight_grad else None
        return dx, dw


@dataclass
class EngineBlock:
    gain1: np.ndarray
    wq: object
    wk: object
    wv: object
    wo: object
    gain2: np.ndarray
    w_up: object
    w_gate: object
    w_down: object


@dataclass
class EngineModel:
    config: ModelConfig
    embedding: np.ndarray
    blocks: list[EngineBlock]
    final_gain: np.ndarray
    head: object

    def linear_ops(self):
        for i, b in enumerate(self.blocks):
            for nm in BLOCK_LINEARS:
                yield f"b{i}.{nm}", getattr(b, nm)
        yield HEAD_NAME, self.head


def dense_engine(model: DenseModel) -> EngineModel:
    blocks = []
    for i, b in enumerate(model.blocks):
        ops = {nm: DenseLinearOp(f"b{i}.{nm}", getattr(b, nm))
               for nm in BLOCK_LINEARS}
        blocks.append(EngineBlock(gain1=b.gain1, gain2=b.gain2, **ops))
    return EngineModel(
        config=model.config,
        embedding=model.embedding,
        blocks=blocks,
        final_gain=model.final_gain,
        head=DenseLinearOp(HEAD_NAME, model.head),
    )


# ---------------------------------------------------------------------------
# forward / backward

@dataclass
class ForwardTrace:
    """Per-layer input activations captured during a traced forward call."""
    activations: dict[str, np.ndarray]  # name -> (IC, tokens)
    tokens: int


def _rope_tables(head_dim: int, n_tokens: int):
    half = head_dim // 2
    inv_freq = ROPE_BASE ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.outer(inv_freq, np.arange(n_tokens, dtype=np.float64))
    return np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)


def _rope_apply(x, cos, sin):
    # x: (B, H, head_dim, T), rotate the (first-half, second-half) pairs
    half = x.shape[2] // 2
    x1, x2 = x[:, :, :half, :], x[:, :, half:, :]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=2)


def _rope_unapply(dx, cos, sin):
    half = dx.shape[2] // 2
    d1, d2 = dx[:, :, :half, :], dx[:, :, half:, :]
    return np.concatenate([d1 * cos + d2 * sin, -d1 * sin + d2 * cos], axis=2)


def _rmsnorm(x, gain):
    # x: (B, C, T)
    ms = np.mean(x * x, axis=1, keepdims=True)
    r = np.sqrt(ms + RMS_EPS)
    return gain[None, :, None] * x / r, r


def _rmsnorm_backward(dy, x, r, gain):
    c = x.shape[1]
    gdy = gain[None, :, None] * dy
    dot = np.sum(gdy * x, axis=1, keepdims=True)
    dx = gdy / r - x * (dot / (c * r ** 3))
    dgain = np.sum(dy * x / r, axis=(0, 2))
    return dx, dgain.astype(np.float32)


def _flat(x3d):
    # (B, C, T) -> (C, B*T)
    b, c, t = x3d.shape
    return np.ascontiguousarray(x3d.transpose(1, 0, 2)).reshape(c, b * t)


def _unflat(x2d, b, t):
    c = x2d.shape[0]
    return x2d.reshape(c, b, t).transpose(1, 0, 2)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def forward_batch(em: EngineModel, tokens: np.ndarray, *, want_trace=False,
                  want_cache=False):
    """Run the model on a (B, T) token batch.

    Returns (logits, trace, cache); trace/cache are None unless requested.
    Causal next-token logits are (B, vocab, T).
    """
    cfg = em.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be (batch, T), got {tokens.shape}")
    B, T = tokens.shape
    if T > cfg.max_seq:
        raise ShapeError(f"sequence length {T} exceeds max_seq {cfg.max_seq}")
    if T > 0 and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ShapeError("token id out of range")

    trace = {} if want_trace else None
    cache = {"tokens": tokens, "B": B, "T": T} if want_cache else None

    if T == 0:
        logits = np.zeros((B, cfg.vocab_size, 0), dtype=np.float32)
        return logits, (ForwardTrace({}, 0) if want_trace else None), cache

    H, hd = cfg.n_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(hd)
    cos, sin = _rope_tables(hd, T)
    causal = np.triu(np.full((T, T), -np.inf, dtype=np.float32), k=1)

    x = em.embedding[tokens].transpose(0, 2, 1).astype(np.float32)  # (B,d,T)
    if want_cache:
        cache["cos"], cache["sin"] = cos, sin
        cache["blocks"] = []

    def run_linear(op, x3d, name):
        x2d = _flat(x3d)
        if want_trace:
            trace[name] = x2d
        if want_cache:
            y2d, state = op.forward_train(x2d)
        else:
            y2d, state = op.apply(x2d), None
        return _unflat(y2d, B, T), state

    for i, blk in enumerate(em.blocks):
        bc = {}
        a, r1 = _rmsnorm(x, blk.gain1)
        q, st_q = run_linear(blk.wq, a, f"b{i}.wq")
        k, st_k = run_linear(blk.wk, a, f"b{i}.wk")
        v, st_v = run_linear(blk.wv, a, f"b{i}.wv")
        qh = _rope_apply(q.reshape(B, H, hd, T), cos, sin)
        kh = _rope_apply(k.reshape(B, H, hd, T), cos, sin)
        vh = v.reshape(B, H, hd, T)
        # batched matmuls (BLAS) instead of einsum: s[q, k] = qh . kh / sqrt
        s = np.matmul(qh.transpose(0, 1, 3, 2), kh) * scale + causal
        s -= s.max(axis=-1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=-1, keepdims=True)
        o = np.matmul(vh, p.transpose(0, 1, 3, 2)).reshape(B, cfg.d_model, T)
        attn, st_o = run_linear(blk.wo, o, f"b{i}.wo")
        x1 = x + attn

        b2, r2 = _rmsnorm(x1, blk.gain2)
        u, st_u = run_linear(blk.w_up, b2, f"b{i}.w_up")
        g, st_g = run_linear(blk.w_gate, b2, f"b{i}.w_gate")
        sig = _sigmoid(g)
        f = (g * sig) * u
        dn, st_d = run_linear(blk.w_down, f, f"b{i}.w_down")
        x2 = x1 + dn

        if want_cache:
            bc.update(x=x, a=a, r1=r1, qh=qh, kh=kh, vh=vh, p=p,
                      x1=x1, r2=r2, u=u, g=g, sig=sig,
                      st_q=st_q, st_k=st_k, st_v=st_v, st_o=st_o,
                      st_u=st_u, st_g=st_g, st_d=st_d)
            cache["blocks"].append(bc)
        x = x2

    z, rf = _rmsnorm(x, em.final_gain)
    logits3d, st_head = run_linear(em.head, z, HEAD_NAME)
    if want_cache:
        cache.update(x_final=x, rf=rf, st_head=st_head)

    ft = ForwardTrace(trace, B * T) if want_trace else None
    return logits3d, ft, cache


def backward_batch(em: EngineModel, cache, dlogits, *, param_grads=True):
    """Backpropagate dlogits (B, vocab, T) through a cached forward pass.

    Returns a dict name -> gradient. Linear layers report whatever their op's
    backward produces (full matrices for dense ops, weak blocks for quantized
    ops). Embedding and norm-gain gradients are included only when
    param_grads is True; input gradients always flow regardless.
    """
    cfg = em.config
    B, T = cache["B"], cache["T"]
    H, hd = cfg.n_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(hd)
    cos, sin = cache["cos"], cache["sin"]
    grads = {}

    def lin_backward(op, state, dy3d, name):
        need = param_grads or getattr(op, "always_weight_grad", False)
        dx2d, dw = op.backward(state, _flat(dy3d), need_weight_grad=need)
        if dw is not None:
            grads[name] = dw
        return _unflat(dx2d, B, T)

    dz = lin_backward(em.head, cache["st_head"], dlogits, HEAD_NAME)
    dx, dgf = _rmsnorm_backward(dz, cache["x_final"], cache["rf"],
                                em.final_gain)
    if param_grads:
        grads["final_gain"] = dgf

    for i in reversed(range(len(em.blocks))):
        blk = em.blocks[i]
        bc = cache["blocks"][i]

        # FFN
        df = lin_backward(blk.w_down, bc["st_d"], dx, f"b{i}.w_down")
        g, sig, u = bc["g"], bc["sig"], bc["u"]
        du = df * (g * sig)
        dg = df * u * (sig * (1.0 + g * (1.0 - sig)))
        db2 = lin_backward(blk.w_up, bc["st_u"], du, f"b{i}.w_up")
        db2 += lin_backward(blk.w_gate, bc["st_g"], dg, f"b{i}.w_gate")
        dx1, dg2 = _rmsnorm_backward(db2, bc["x1"], bc["r2"], blk.gain2)
        dx1 += dx
        if param_grads:
            grads[f"b{i}.gain2"] = dg2

        # attention
        do3d = lin_backward(blk.wo, bc["st_o"], dx1, f"b{i}.wo")
        do = do3d.reshape(B, H, hd, T)
        p, qh, kh, vh = bc["p"], bc["qh"], bc["kh"], bc["vh"]
        dp = np.matmul(do.transpose(0, 1, 3, 2), vh)
        dvh = np.matmul(do, p)
        ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
        dqh = np.matmul(kh, ds.transpose(0, 1, 3, 2)) * scale
        dkh = np.matmul(qh, ds) * scale
        dq = _rope_unapply(dqh, cos, sin).reshape(B, cfg.d_model, T)
        dk = _rope_unapply(dkh, cos, sin).reshape(B, cfg.d_model, T)
        dv = dvh.reshape(B, cfg.d_model, T)
        da = lin_backward(blk.wq, bc["st_q"], dq, f"b{i}.wq")
        da += lin_backward(blk.wk, bc["st_k"], dk, f"b{i}.wk")
        da += lin_backward(blk.wv, bc["st_v"], dv, f"b{i}.wv")
        dxb, dg1 = _rmsnorm_backward(da, bc["x"], bc["r1"], blk.gain1)
        dx = dx1 + dxb
        if param_grads:
            grads[f"b{i}.gain1"] = dg1

    if param_grads:
        demb = np.zeros_like(em.embedding)
        rows = cache["tokens"].reshape(-1)
        np.add.at(demb, rows, _flat(dx).T.astype(np.float32))
        grads["embedding"] = demb
    return grads


def forward(model: DenseModel, tokens, trace: bool = False):
    """Single-sequence forward: causal logits (vocab, T).

    With trace=True also returns the per-linear-layer input activations.
    """
    em = model if isinstance(model, EngineModel) else dense_engine(model)
    tok = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    logits3d, ft, _ = forward_batch(em, tok, want_trace=trace)
    logits = logits3d[0]
    if trace:
        return logits, ft
    return logits


# ---------------------------------------------------------------------------
# loss

def _nll_pieces(logits, targets):
    logits = np.asarray(logits, dtype=np.float32)
    targets = np.asarray(targets, dtype=np.int64)
    squeeze = logits.ndim == 2
    if squeeze:
        logits = logits[None]
        targets = targets.reshape(1, -1)
    B, V, T = logits.shape
    if targets.shape != (B, T):
        raise ShapeError(
            f"targets shape {targets.shape} does not match logits positions"
            f" ({B}, {T})")
    return logits, targets, squeeze


def cross_entropy(logits, targets) -> float:
    """Mean negative log-likelihood with exact softmax normalization."""
    x, targets, _ = _nll_pieces(logits, targets)
    if x.shape[2] == 0:
        return 0.0
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0, :] + np.log(np.exp(x - m).sum(axis=1))
    picked = np.take_along_axis(x, targets[:, None, :], axis=1)[:, 0, :]
    return float(np.mean((lse - picked).astype(np.float64)))


def cross_entropy_grad(logits, targets):
    """d(mean NLL)/dlogits, float32, same shape as logits."""
    _, g = cross_entropy_with_grad(logits, targets)
    return g


def cross_entropy_with_grad(logits, targets):
    """(loss, dloss/dlogits) with one shared softmax evaluation."""
    x, targets, squeeze = _nll_pieces(logits, targets)
    B, V, T = x.shape
    if T == 0:
        return 0.0, np.zeros_like(x if not squeeze else x[0])
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    lse = m[:, 0, :] + np.log(z[:, 0, :])
    picked = np.take_along_axis(x, targets[:, None, :], axis=1)[:, 0, :]
    loss = float(np.mean((lse - picked).astype(np.float64)))
    p = e / z
    np.subtract.at(p, (np.arange(B)[:, None], targets,
                       np.arange(T)[None, :]), 1.0)
    g = p / np.float32(B * T)
    return loss, (g[0] if squeeze else g)


# ---------------------------------------------------------------------------
# corpus helpers

def split_corpus(data, eval_frac: float = 0.1):
    """Split a byte stream into (train, eval) token arrays."""
    ids = encode_bytes(data)
    n_eval = max(1, int(len(ids) * eval_frac))
    return ids[:-n_eval], ids[-n_eval:]


def sample_windows(rng, ids, n, seq_len):
    """Sample n random (seq_len+1)-token windows; returns (inputs, targets)."""
    if len(ids) < seq_len + 1:
        raise ShapeError("corpus shorter than one training window")
    starts = rng.integers(0, len(ids) - seq_len - 1, size=n)
    w = np.stack([ids[s:s + seq_len + 1] for s in starts])
    return w[:, :-1], w[:, 1:]


def eval_windows(ids, seq_len, max_windows=64):
    """Deterministic non-overlapping eval windows (inputs, targets)."""
    n = min(max_windows, (len(ids) - 1) // seq_len)
    if n < 1:
        raise ShapeError("eval split shorter than one window")
    w = np.stack([ids[i * seq_len:i * seq_len + seq_len + 1]
                  for i in range(n)])
    return w[:, :-1], w[:, 1:]


def eval_perplexity(em, ids, seq_len: int = 128, max_windows: int = 64,
                    batch: int = 8):
    """Mean held-out NLL and perplexity over deterministic windows."""
    if isinstance(em, DenseModel):
        em = dense_engine(em)
    seq_len = min(seq_len, em.config.max_seq)
    inputs, targets = eval_windows(np.asarray(ids), seq_len, max_windows)
    total, count = 0.0, 0
    for i in range(0, len(inputs), batch):
        xb, yb = inputs[i:i + batch], targets[i:i + batch]
        logits, _, _ = forward_batch(em, xb)
        total += cross_entropy(logits, yb) * xb.size
        count += xb.size
    loss = total / count
    return loss, math.exp(loss)


# ---------------------------------------------------------------------------
# dense trainer

@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 2e-3
    lr_schedule: str = "cosine"  # "cosine" decays to lr_floor; "constant"
    lr_floor_frac: float = 0.02
    batch: int = 8
    seq_len: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 1.0
    seed: int = 0
    log_every: int = 200

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "constant" or self.steps <= 1:
            return self.lr
        frac = (step - 1) / (self.steps - 1)
        floor = self.lr * self.lr_floor_frac
        return floor + 0.5 * (self.lr - floor) * (1.0 + math.cos(math.pi * frac))


def train_dense(model: DenseModel, corpus, steps: int | None = None,
                lr: float | None = None, *, config: TrainConfig | None = None,
                log: list | None = None) -> DenseModel:
    """Adam-train a copy of the model on next-byte prediction.

    The input model is never mutated. Sampling, accumulation order, and
    updates are fully determined by config.seed.
    """
    cfg = config or TrainConfig()
    if steps is not None:
        cfg = replace(cfg, steps=steps)
    if lr is not None:
        cfg = replace(cfg, lr=lr)

    out = model.copy()
    if cfg.steps == 0:
        return out
    ids = encode_bytes(corpus)
    rng = np.random.default_rng(cfg.seed)
    em = dense_engine(out)
    params = dict(named_params(out))
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v2 = {k: np.zeros_like(v) for k, v in params.items()}

    for step in range(1, cfg.steps + 1):
        xb, yb = sample_windows(rng, ids, cfg.batch, cfg.seq_len)
        logits, _, cache = forward_batch(em, xb, want_cache=True)
        loss, dlogits = cross_entropy_with_grad(logits, yb)
        if not math.isfinite(loss):
            raise DivergenceError(
                f"non-finite loss {loss} at step {step}", step=step)
        grads = backward_batch(em, cache, dlogits)

        gnorm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2))
                              for g in grads.values()))
        scale = min(1.0, cfg.clip / (gnorm + 1e-12)) if cfg.clip else 1.0
        lr_t = cfg.lr_at(step)
        bc1 = 1.0 - cfg.beta1 ** step
        bc2 = 1.0 - cfg.beta2 ** step
        for k, g in grads.items():
            g = g * scale
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g
            v2[k] = cfg.beta2 * v2[k] + (1.0 - cfg.beta2) * g * g
            params[k] -= (lr_t * (m[k] / bc1)
                          / (np.sqrt(v2[k] / bc2) + cfg.eps)).astype(np.float32)

        if log is not None and (step % cfg.log_every == 0 or step == 1):
            log.append({"step": step, "loss": loss, "grad_norm": gnorm})
    return out
