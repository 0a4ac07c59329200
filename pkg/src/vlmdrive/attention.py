"""Multi-head self- and cross-attention blocks (post-norm, no positional encoding).

Rows are treated as unordered sets. Before any arithmetic, query and context
rows are put in a canonical content-defined order and the output is scattered
back, so permuting rows changes nothing but the output row order, bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

LN_EPS = 1e-5


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class MultiHeadParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln_gain: Tensor
    ln_bias: Tensor
    heads: int = 8

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @classmethod
    def init(cls, dim: int, heads: int, rng: np.random.Generator) -> "MultiHeadParams":
        if heads < 1 or dim % heads:
            raise ConfigError(f"dimension {dim} is not divisible by {heads} heads")
        mats = [Tensor(glorot(rng, dim, dim), requires_grad=True) for _ in range(4)]
        return cls(*mats, ln_gain=Tensor(np.ones(dim), requires_grad=True),
                   ln_bias=Tensor(np.zeros(dim), requires_grad=True), heads=heads)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k)
                for k in ("w_q", "w_k", "w_v", "w_o", "ln_gain", "ln_bias")}


def canonical_order(x: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Per-sample row permutation (B, m) that depends only on the row contents.

    Valid rows come first, ordered lexicographically by their values.
    """
    b, m, _ = x.shape
    if valid is None:
        valid = np.ones((b, m), dtype=bool)
    out = np.empty((b, m), dtype=np.intp)
    for i in range(b):
        keys = x[i].T[::-1]
        out[i] = np.lexsort(np.vstack([keys, ~valid[i][None, :]]))
    return out


def _inverse(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    np.put_along_axis(inv, perm, np.arange(perm.shape[1])[None, :].repeat(perm.shape[0], 0), axis=1)
    return inv


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeError(f"attention expects (m, D) or (B, m, D), got {x.shape}")
    return x, False


def attention_weights(queries: Tensor, context: Tensor, params: MultiHeadParams,
                      key_mask: np.ndarray | None = None) -> list[np.ndarray]:
    """Per-head (B, m, t) attention weight matrices, in the caller's row order."""
    _, weights = _attend(queries, context, params, key_mask, self_mode=False, keep_weights=True)
    return weights


def _attend(queries: Tensor, context: Tensor, params: MultiHeadParams,
            key_mask: np.ndarray | None, self_mode: bool, keep_weights: bool = False):
    d = params.dim
    if queries.shape[-1] != d or context.shape[-1] != d:
        raise ShapeError(f"attention dim {d} vs queries {queries.shape}, context {context.shape}")
    queries, squeeze = _as_batch(queries)
    context, _ = _as_batch(context)
    if queries.shape[0] != context.shape[0]:
        raise ShapeError(f"batch sizes differ: {queries.shape} vs {context.shape}")
    b, t = context.shape[0], context.shape[1]
    if key_mask is None:
        key_mask = np.ones((b, t), dtype=bool)
    else:
        key_mask = np.asarray(key_mask, dtype=bool).reshape(b, t)

    kperm = canonical_order(context.data, key_mask)
    qperm = kperm if self_mode else canonical_order(queries.data)
    q_in = T.take_rows(queries, qperm)
    kv_in = q_in if self_mode else T.take_rows(context, kperm)
    kmask = np.take_along_axis(key_mask, kperm, axis=1)

    q = T.matmul(q_in, params.w_q)
    k = T.matmul(kv_in, params.w_k)
    v = T.matmul(kv_in, params.w_v)
    hd = params.head_dim
    inv_sqrt = 1.0 / np.sqrt(hd)
    heads, weights = [], []
    for h in range(params.heads):
        lo, hi = h * hd, (h + 1) * hd
        logits = T.scale(T.matmul(T.slice_last(q, lo, hi), T.transpose(T.slice_last(k, lo, hi))), inv_sqrt)
        w = T.rowwise_softmax(logits, kmask[:, None, :])
        if keep_weights:
            qi, ki = _inverse(qperm), _inverse(kperm)
            wd = np.take_along_axis(w.data, qi[:, :, None], axis=1)
            weights.append(np.take_along_axis(wd, ki[:, None, :], axis=2))
        heads.append(T.matmul(w, T.slice_last(v, lo, hi)))
    mixed = T.matmul(T.concat_last(heads), params.w_o)
    out = T.layer_norm(T.add(q_in, mixed), params.ln_gain, params.ln_bias, LN_EPS)
    out = T.take_rows(out, _inverse(qperm))
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return out, weights


def self_attention(x: Tensor, params: MultiHeadParams, mask: np.ndarray | None = None) -> Tensor:
    """Each row attends to every valid row of ``x``; output has the shape of ``x``."""
    out, _ = _attend(x, x, params, mask, self_mode=True)
    return out


def cross_attention(queries: Tensor, context: Tensor, params: MultiHeadParams,
                    context_mask: np.ndarray | None = None) -> Tensor:
    """Rows of ``queries`` attend to rows of ``context``; output has the shape of ``queries``."""
    out, _ = _attend(queries, context, params, context_mask, self_mode=False)
    return out
