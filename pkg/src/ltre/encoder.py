"""Fixed document representations and the trainable query encoder.

The query side is deliberately small: a query is featurized as the mean of
its term embeddings, then passed through a trainable k x k linear layer with
optional inverted dropout and layer norm. Only these parameters ever change
during training; document embeddings are fixed for the lifetime of a run.

All training math is float64. Checkpoint format (little-endian):

    magic b"LTRP" | version u32 | dim_k u32 | flags u8 (bit 0: layer norm)
    then W (k*k), bias (k), ln_gain (k), ln_bias (k) as row-major f64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Mapping, Sequence

import numpy as np

if TYPE_CHECKING:
    from .corpus import Query

LN_EPS = 1e-5
ADAM_EPS = 1e-8

_CKPT_MAGIC = b"LTRP"
_CKPT_VERSION = 1


@dataclass
class TermEmbeddingTable:
    """Fixed term embeddings, one row per vocabulary entry."""

    vectors: np.ndarray  # (vocab_size, dim_k) float64
    terms: list[str]

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError("term table must be 2-D")
        if len(self.terms) != self.vectors.shape[0]:
            raise ValueError(
                f"term count {len(self.terms)} != row count {self.vectors.shape[0]}"
            )
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("term table contains non-finite entries")
        self.vectors.flags.writeable = False

    @property
    def vocab(self) -> dict[str, int]:
        if not hasattr(self, "_vocab"):
            object.__setattr__(self, "_vocab", {t: i for i, t in enumerate(self.terms)})
        return self._vocab  # type: ignore[attr-defined]


@dataclass
class DocEmbeddingMatrix:
    """Immutable document embeddings with an ordinal <-> doc_id bijection."""

    rows: np.ndarray  # (num_docs, dim_k) float64
    doc_ids: list[str]

    def __post_init__(self) -> None:
        self.rows = np.ascontiguousarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ValueError("embedding matrix must be 2-D")
        if len(self.doc_ids) != self.rows.shape[0]:
            raise ValueError(
                f"doc_id count {len(self.doc_ids)} != row count {self.rows.shape[0]}"
            )
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise ValueError("doc_ids must be unique")
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("embedding matrix contains non-finite entries")
        self.rows.flags.writeable = False
        self.ordinal_of = {d: i for i, d in enumerate(self.doc_ids)}

    @property
    def num_docs(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass
class QueryEncoderParams:
    """Trainable parameters: linear projection plus layer-norm gain/bias."""

    W: np.ndarray
    bias: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    use_layer_norm: bool = True
    dropout_p: float = 0.0

    def __post_init__(self) -> None:
        self.W = np.asarray(self.W, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.ln_gain = np.asarray(self.ln_gain, dtype=np.float64)
        self.ln_bias = np.asarray(self.ln_bias, dtype=np.float64)
        k = self.W.shape[0]
        if self.W.shape != (k, k):
            raise ValueError(f"W must be square, got {self.W.shape}")
        for name in ("bias", "ln_gain", "ln_bias"):
            if getattr(self, name).shape != (k,):
                raise ValueError(f"{name} must have shape ({k},)")
        for name in ("W", "bias", "ln_gain", "ln_bias"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite entries")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def dim(self) -> int:
        return self.W.shape[0]

    @classmethod
    def initial(
        cls,
        dim_k: int,
        rng: np.random.Generator | None = None,
        init_noise: float = 0.02,
        use_layer_norm: bool = True,
        dropout_p: float = 0.0,
    ) -> "QueryEncoderParams":
        """Identity projection plus small seeded noise; unit layer-norm gain."""
        W = np.eye(dim_k)
        if rng is not None and init_noise > 0:
            W = W + init_noise * rng.standard_normal((dim_k, dim_k))
        return cls(
            W=W,
            bias=np.zeros(dim_k),
            ln_gain=np.ones(dim_k),
            ln_bias=np.zeros(dim_k),
            use_layer_norm=use_layer_norm,
            dropout_p=dropout_p,
        )

    def copy(self) -> "QueryEncoderParams":
        return QueryEncoderParams(
            W=self.W.copy(),
            bias=self.bias.copy(),
            ln_gain=self.ln_gain.copy(),
            ln_bias=self.ln_bias.copy(),
            use_layer_norm=self.use_layer_norm,
            dropout_p=self.dropout_p,
        )


PARAM_FIELDS = ("W", "bias", "ln_gain", "ln_bias")


@dataclass
class ParamGrads:
    W: np.ndarray
    bias: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray

    @classmethod
    def zeros_like(cls, params: QueryEncoderParams) -> "ParamGrads":
        return cls(
            W=np.zeros_like(params.W),
            bias=np.zeros_like(params.bias),
            ln_gain=np.zeros_like(params.ln_gain),
            ln_bias=np.zeros_like(params.ln_bias),
        )


def extract_query_features(
    query: "Query | Sequence[str]",
    table: TermEmbeddingTable,
    vocab: Mapping[str, int] | None = None,
) -> np.ndarray:
    """Mean of the embedding rows of in-vocabulary tokens; zeros if none match."""
    tokens = query.tokens if hasattr(query, "tokens") else query
    voc = vocab if vocab is not None else table.vocab
    rows = [voc[t] for t in tokens if t in voc]
    if not rows:
        return np.zeros(table.vectors.shape[1])
    return table.vectors[rows].mean(axis=0)


@dataclass
class EncodeCache:
    """Intermediate values of a forward pass, needed for the exact backward."""

    x: np.ndarray          # (B, k) input features
    keep: np.ndarray | None  # (B, k) inverted-dropout multiplier, None if inactive
    h: np.ndarray          # (B, k) post-dropout linear output
    normed: np.ndarray | None  # (B, k) (h - mean) * inv_std, None if layer norm off
    inv_std: np.ndarray | None  # (B, 1)


def encode_batch(
    params: QueryEncoderParams,
    X: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, EncodeCache]:
    """Encode a (B, k) feature batch; returns embeddings and the backward cache.

    Train mode applies inverted dropout to the linear output (zero with
    probability dropout_p, survivors scaled by 1/(1-p)); eval mode never does,
    so train and eval outputs differ whenever dropout is active.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.dim:
        raise ValueError(f"expected features of shape (B, {params.dim}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite entries")

    h = X @ params.W.T + params.bias
    keep = None
    if mode == "train" and params.dropout_p > 0.0:
        if rng is None:
            raise ValueError("train-mode dropout requires an rng")
        mask = rng.random(h.shape) >= params.dropout_p
        keep = mask / (1.0 - params.dropout_p)
        h = h * keep

    if params.use_layer_norm:
        mean = h.mean(axis=1, keepdims=True)
        centered = h - mean
        var = (centered * centered).mean(axis=1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + LN_EPS)
        normed = centered * inv_std
        out = params.ln_gain * normed + params.ln_bias
        return out, EncodeCache(x=X, keep=keep, h=h, normed=normed, inv_std=inv_std)
    return h, EncodeCache(x=X, keep=keep, h=h, normed=None, inv_std=None)


def encode_query(
    params: QueryEncoderParams,
    x: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Encode a single feature vector. Pure function of its inputs in eval mode."""
    out, _ = encode_batch(params, np.asarray(x, dtype=np.float64)[None, :], mode, rng)
    return out[0]


def encode_query_forward(
    params: QueryEncoderParams,
    x: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, EncodeCache]:
    out, cache = encode_batch(params, np.asarray(x, dtype=np.float64)[None, :], mode, rng)
    return out[0], cache


def encode_batch_backward(
    params: QueryEncoderParams,
    cache: EncodeCache,
    upstream: np.ndarray,
) -> ParamGrads:
    """Exact gradients of the forward map, summed over the batch.

    Layer-norm backward (per row, d = dim): with n = (h - mu) * inv_std,
        dh = inv_std * (g*dy - mean(g*dy) - n * mean(g*dy * n))
    Dropout backward multiplies by the stored keep mask; the linear layer
    contributes dW = dh^T x and dbias = sum(dh).
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != cache.h.shape:
        raise ValueError(f"upstream shape {upstream.shape} != forward shape {cache.h.shape}")

    if params.use_layer_norm:
        if cache.normed is None or cache.inv_std is None:
            raise ValueError("cache was produced without layer norm; params mismatch")
        g_dy = upstream * params.ln_gain
        grad_gain = (upstream * cache.normed).sum(axis=0)
        grad_bias_ln = upstream.sum(axis=0)
        dh = cache.inv_std * (
            g_dy
            - g_dy.mean(axis=1, keepdims=True)
            - cache.normed * (g_dy * cache.normed).mean(axis=1, keepdims=True)
        )
    else:
        if cache.normed is not None:
            raise ValueError("cache was produced with layer norm; params mismatch")
        grad_gain = np.zeros_like(params.ln_gain)
        grad_bias_ln = np.zeros_like(params.ln_bias)
        dh = upstream

    if cache.keep is not None:
        dh = dh * cache.keep

    return ParamGrads(
        W=dh.T @ cache.x,
        bias=dh.sum(axis=0),
        ln_gain=grad_gain,
        ln_bias=grad_bias_ln,
    )


def encode_query_backward(
    params: QueryEncoderParams,
    x: np.ndarray,
    cache: EncodeCache,
    upstream: np.ndarray,
) -> ParamGrads:
    """Backward pass for a single query encoded with ``encode_query_forward``."""
    x = np.asarray(x, dtype=np.float64)
    if cache.x.shape != (1, x.shape[0]) or not np.array_equal(cache.x[0], x):
        raise ValueError("cache does not match the given input features")
    return encode_batch_backward(params, cache, np.asarray(upstream, dtype=np.float64)[None, :])


def finite_difference_gradients(
    loss_fn: Callable[[QueryEncoderParams], float],
    params: QueryEncoderParams,
    eps: float = 1e-5,
) -> ParamGrads:
    """Central-difference gradient estimate, one coordinate at a time.

    ``loss_fn`` must be deterministic (freeze any dropout mask before use).
    """
    grads = ParamGrads.zeros_like(params)
    for name in PARAM_FIELDS:
        base = getattr(params, name)
        out = getattr(grads, name)
        for idx in np.ndindex(base.shape):
            probe = params.copy()
            arr = getattr(probe, name)
            arr[idx] = base[idx] + eps
            up = loss_fn(probe)
            arr[idx] = base[idx] - eps
            down = loss_fn(probe)
            out[idx] = (up - down) / (2.0 * eps)
    return grads


@dataclass
class OptimizerState:
    """Decoupled-weight-decay Adam with linear warmup then linear decay."""

    lr: float
    warmup_steps: int
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = ADAM_EPS
    step_count: int = 0
    first_moment: ParamGrads | None = None
    second_moment: ParamGrads | None = None

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(
                f"warmup_steps ({self.warmup_steps}) must be in [0, total_steps)"
            )

    @classmethod
    def fresh(
        cls,
        params: QueryEncoderParams,
        lr: float,
        warmup_steps: int,
        total_steps: int,
        beta1: float = 0.9,
        beta2: float = 0.999,
        weight_decay: float = 0.01,
    ) -> "OptimizerState":
        state = cls(
            lr=lr,
            warmup_steps=warmup_steps,
            total_steps=total_steps,
            beta1=beta1,
            beta2=beta2,
            weight_decay=weight_decay,
        )
        state.first_moment = ParamGrads.zeros_like(params)
        state.second_moment = ParamGrads.zeros_like(params)
        return state


def effective_lr(state: OptimizerState, step: int) -> float:
    """Learning rate applied at 1-based update ``step``."""
    if state.warmup_steps > 0 and step <= state.warmup_steps:
        return state.lr * step / state.warmup_steps
    denom = max(state.total_steps - state.warmup_steps, 1)
    return state.lr * max(state.total_steps - step, 0) / denom


def adamw_step(
    state: OptimizerState,
    params: QueryEncoderParams,
    grads: ParamGrads,
) -> tuple[QueryEncoderParams, OptimizerState]:
    """One optimizer update, in place. Raises on non-finite gradients.

    Weight decay is decoupled: theta <- theta - lr_eff * wd * theta, applied
    before the bias-corrected moment term.
    """
    if state.first_moment is None or state.second_moment is None:
        state.first_moment = ParamGrads.zeros_like(params)
        state.second_moment = ParamGrads.zeros_like(params)
    for name in PARAM_FIELDS:
        g = getattr(grads, name)
        if g.shape != getattr(params, name).shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient in {name}; halting the run")

    state.step_count += 1
    s = state.step_count
    lr_eff = effective_lr(state, s)
    bc1 = 1.0 - state.beta1**s
    bc2 = 1.0 - state.beta2**s

    for name in PARAM_FIELDS:
        theta = getattr(params, name)
        g = getattr(grads, name)
        m = getattr(state.first_moment, name)
        v = getattr(state.second_moment, name)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay != 0.0:
            theta -= lr_eff * state.weight_decay * theta
        theta -= lr_eff * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def save_checkpoint(params: QueryEncoderParams, path: str | Path) -> None:
    k = params.dim
    flags = 1 if params.use_layer_norm else 0
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIIB", _CKPT_MAGIC, _CKPT_VERSION, k, flags))
        for name in PARAM_FIELDS:
            f.write(np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> QueryEncoderParams:
    data = Path(path).read_bytes()
    header = struct.calcsize("<4sIIB")
    if len(data) < header:
        raise ValueError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, k, flags = struct.unpack_from("<4sIIB", data)
    if magic != _CKPT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {_CKPT_MAGIC!r}")
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    expected = header + 8 * (k * k + 3 * k)
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, got {len(data)}")
    body = np.frombuffer(data, dtype="<f8", offset=header)
    W, rest = body[: k * k].reshape(k, k), body[k * k :]
    bias, ln_gain, ln_bias = rest[:k], rest[k : 2 * k], rest[2 * k : 3 * k]
    return QueryEncoderParams(
        W=W.copy(),
        bias=bias.copy(),
        ln_gain=ln_gain.copy(),
        ln_bias=ln_bias.copy(),
        use_layer_norm=bool(flags & 1),
    )
