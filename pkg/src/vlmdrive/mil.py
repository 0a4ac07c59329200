"""Instance classifiers, top-k pooling, branch fusion, MIL loss and explanations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import glorot
from .errors import DataError, ShapeError
from .tensor import Tensor


@dataclass
class Cam:
    """Per-instance class logits (B, m, C) plus instance validity (B, m)."""

    scores: Tensor
    mask: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return self.scores.data


@dataclass
class ClassifierParams:
    """Affine D->D->D->C with relu and dropout between layers."""

    weights: list[Tensor]
    biases: list[Tensor]
    dropout: float = 0.7

    @classmethod
    def init(cls, dim: int, num_classes: int, rng: np.random.Generator,
             dropout: float = 0.7) -> "ClassifierParams":
        sizes = [dim, dim, dim, num_classes]
        ws = [Tensor(glorot(rng, a, b), requires_grad=True) for a, b in zip(sizes[:-1], sizes[1:])]
        bs = [Tensor(np.zeros(b), requires_grad=True) for b in sizes[1:]]
        return cls(ws, bs, dropout)

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out


def compute_cam(z: Tensor, mask: np.ndarray, classifier: ClassifierParams,
                training: bool = False, rng: np.random.Generator | None = None) -> Cam:
    if z.shape[-1] != classifier.weights[0].shape[0]:
        raise ShapeError(f"classifier expects width {classifier.weights[0].shape[0]}, got {z.shape}")
    h = z
    last = len(classifier.weights) - 1
    for i, (w, b) in enumerate(zip(classifier.weights, classifier.biases)):
        h = T.add(T.matmul(h, w), b)
        if i < last:
            h = T.dropout(T.relu(h), classifier.dropout, training, rng)
    return Cam(h, np.asarray(mask, dtype=bool))


def topk_avg_pool(cam: Cam, k: int) -> Tensor:
    """Per class, the mean of the k largest valid scores (k clamps to the valid count)."""
    return T.topk_avg_pool(cam.scores, cam.mask, k)


def fuse(p_v, p_l, lam: float) -> Tensor:
    p_v, p_l = T.as_tensor(p_v), T.as_tensor(p_l)
    if p_v.shape != p_l.shape:
        raise ShapeError(f"fuse: {p_v.shape} vs {p_l.shape}")
    if lam == 1.0:
        return p_v
    if lam == 0.0:
        return p_l
    return T.add(T.scale(p_v, lam), T.scale(p_l, 1.0 - lam))


def check_labels(y: np.ndarray, multi_label: bool) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0/1")
    pos = y.sum(axis=-1)
    if multi_label and np.any(pos < 1):
        raise DataError("multi-label targets need at least one positive class")
    if not multi_label and np.any(pos != 1):
        raise DataError("single-label targets need exactly one positive class")
    return y


def mil_loss(logits, y: np.ndarray, multi_label: bool = True) -> Tensor:
    """BCE-with-logits averaged over classes (and batch), or softmax CE in single-label mode."""
    y = check_labels(y, multi_label)
    logits = T.as_tensor(logits)
    if logits.shape != y.shape:
        raise ShapeError(f"mil_loss: logits {logits.shape} vs labels {y.shape}")
    if multi_label:
        return T.bce_with_logits(logits, y)
    return T.softmax_cross_entropy(logits, y)


def probabilities(logits: np.ndarray, multi_label: bool) -> np.ndarray:
    if multi_label:
        return 0.5 * (1.0 + np.tanh(0.5 * logits))
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def decide(logits: np.ndarray, multi_label: bool, threshold: float = 0.5) -> np.ndarray:
    if multi_label:
        return (probabilities(logits, True) >= threshold).astype(np.int64)
    out = np.zeros(logits.shape, dtype=np.int64)
    np.put_along_axis(out, logits.argmax(axis=-1)[..., None], 1, axis=-1)
    return out


def topk_indices(scores: np.ndarray, valid: np.ndarray, k: int) -> list[list[np.ndarray]]:
    """For (B, m, C) scores: per sample, per class, the selected rows by descending score."""
    order, kk = T.topk_select(scores, np.asarray(valid, dtype=bool), k)
    return [[order[b, :kk[b], c].copy() for c in range(scores.shape[2])]
            for b in range(scores.shape[0])]


@dataclass
class DecisionOutput:
    logits: np.ndarray
    probabilities: np.ndarray
    decisions: np.ndarray
    vision_explanation: dict[int, list[int]] = field(default_factory=dict)
    text_explanation: dict[int, list[int]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


def explain(cam_v: Cam | None, cam_l: Cam | None, decisions: np.ndarray, k: int,
            k_hat: int) -> tuple[list[dict[int, list[int]]], list[dict[int, list[int]]]]:
    """Top-k vision and top-k_hat text indices for every class decided positive.

    Returns one dict (class -> indices) per sample for each branch; a disabled
    branch yields empty dicts.
    """
    decisions = np.atleast_2d(decisions)
    b = decisions.shape[0]
    vis = topk_indices(cam_v.values, cam_v.mask, k) if cam_v is not None else None
    txt = topk_indices(cam_l.values, cam_l.mask, k_hat) if cam_l is not None else None
    out_v, out_t = [], []
    for i in range(b):
        pos = np.flatnonzero(decisions[i])
        out_v.append({int(c): vis[i][c].tolist() for c in pos} if vis else {})
        out_t.append({int(c): txt[i][c].tolist() for c in pos} if txt else {})
    return out_v, out_t
