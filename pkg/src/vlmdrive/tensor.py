"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record onto a tape when one is active (``with Tape() as tape``)
and at least one input requires a gradient; outside a tape everything runs as
plain numpy, which is what inference uses.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, UsageError

_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations executed while active."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def record(self, out: Tensor) -> None:
        self.nodes.append(out)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)

    def clear(self) -> None:
        for node in self.nodes:
            node._backward = None
        self.nodes = []


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._backward = None
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._backward = backward_fn
        tape.record(out)
    else:
        out.requires_grad = False
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor reachable on ``tape``."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss is not connected to any tensor that requires grad")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)

    def bw(g):
        x._accumulate(g * c)

    return _make(x.data * c, (x,), bw)


def matmul(a, b) -> Tensor:
    """Matrix product; a leading batch axis on either side is broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch sizes differ {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(out, (a, b), bw)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _make(out, (x,), bw)


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)

    def bw(g):
        x._accumulate(np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(x.data, -1, -2), (x,), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    keep = x.data > 0

    def bw(g):
        x._accumulate(g * keep)

    return _make(np.where(keep, x.data, 0.0), (x,), bw)


def rowwise_softmax(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable to ``x``) marks admissible entries; the rest get
    exactly zero weight. Every row needs at least one admissible entry.
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        x._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (x,), bw)


def mean_over_axis(x, axis: int) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"mean_over_axis: axis {axis} out of range for shape {x.shape}")
    size = x.shape[axis]

    def bw(g):
        x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape) / size)

    return _make(x.data.mean(axis=axis), (x,), bw)


def sum_all(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum()), (x,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: feature size {d} vs gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            x._accumulate(gx)

    return _make(out, (x, gain, bias), bw)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so inference is identity."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def bw(g):
        x._accumulate(g * keep)

    return _make(x.data * keep, (x,), bw)


def slice_last(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        x._accumulate(full)

    return _make(x.data[..., start:stop], (x,), bw)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accumulate(g[..., lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=-1), parts, bw)


def take_rows(x, index: np.ndarray) -> Tensor:
    """Gather along axis 1 of a (B, m, d) tensor with per-sample row indices (B, r)."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"take_rows expects a rank-3 tensor, got {x.shape}")
    index = np.asarray(index, dtype=np.intp)
    batch = np.arange(x.shape[0])[:, None]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (batch, index), g)
        x._accumulate(full)

    return _make(x.data[batch, index], (x,), bw)


def bce_with_logits(logits, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean binary cross-entropy over entries with nonzero weight."""
    logits = as_tensor(logits)
    z = logits.data
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != z.shape:
        raise ShapeError(f"bce_with_logits: logits {z.shape} vs targets {y.shape}")
    w = np.ones_like(z) if weights is None else np.broadcast_to(weights, z.shape).astype(np.float64)
    count = w.sum()
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = (per * w).sum() / count

    def bw(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        logits._accumulate(g * (sig - y) * w / count)

    return _make(np.asarray(loss), (logits,), bw)


def softmax_cross_entropy(logits, onehot: np.ndarray) -> Tensor:
    """Mean over rows of -sum(y * log softmax(z))."""
    logits = as_tensor(logits)
    z = logits.data
    y = np.asarray(onehot, dtype=np.float64)
    if y.shape != z.shape:
        raise ShapeError(f"softmax_cross_entropy: logits {z.shape} vs targets {y.shape}")
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = int(np.prod(z.shape[:-1])) if z.ndim > 1 else 1
    loss = -(y * logp).sum() / rows

    def bw(g):
        p = np.exp(logp)
        logits._accumulate(g * (p * y.sum(axis=-1, keepdims=True) - y) / rows)

    return _make(np.asarray(loss), (logits,), bw)


def topk_select(scores: np.ndarray, valid: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample, per-class top-k row indices over valid rows.

    scores: (B, m, C); valid: (B, m). Returns ``order`` (B, m, C) with rows
    sorted by descending score (ties -> lower index, invalid rows last) and the
    clamped k per sample (B,).
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    counts = valid.sum(axis=1)
    if np.any(counts == 0):
        from .errors import DataError

        raise DataError("top-k pooling over a sample with zero valid instances")
    keyed = np.where(valid[:, :, None], -scores, np.inf)
    order = np.argsort(keyed, axis=1, kind="stable")
    return order, np.minimum(k, counts)


def topk_avg_pool(cam, valid: np.ndarray, k: int) -> Tensor:
    """Mean of the k largest valid scores per class: (B, m, C) -> (B, C)."""
    cam = as_tensor(cam)
    if cam.ndim != 3:
        raise ShapeError(f"topk_avg_pool expects (B, m, C), got {cam.shape}")
    valid = np.asarray(valid, dtype=bool)
    order, kk = topk_select(cam.data, valid, k)
    ranked = np.take_along_axis(cam.data, order, axis=1)
    rank = np.arange(cam.shape[1])[None, :, None]
    chosen = rank < kk[:, None, None]
    # sequential sum in descending order; keeps results independent of row order
    running = np.cumsum(np.where(chosen, ranked, 0.0), axis=1)
    last = (kk - 1)[:, None, None]
    pooled = np.take_along_axis(running, np.broadcast_to(last, (cam.shape[0], 1, cam.shape[2])), axis=1)[:, 0, :]
    pooled = pooled / kk[:, None]

    def bw(g):
        full = np.zeros_like(cam.data)
        contrib = np.where(chosen, g[:, None, :] / kk[:, None, None], 0.0)
        np.put_along_axis(full, order, contrib, axis=1)
        cam._accumulate(full)

    return _make(pooled, (cam,), bw)
