"""Dual-branch local/global fusion model.

Vision branch: local object rows self-attend, then cross-attend to the global
frame rows. Text branch: description rows cross-attend to the global rows.
Each branch ends in an instance classifier whose CAM is top-k pooled; the two
pooled vectors are mixed with weight ``lam`` on the vision side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import MultiHeadParams, canonical_order, cross_attention, glorot, self_attention
from .config import ModelConfig
from .data import Batch
from .errors import ShapeError
from .mil import Cam, ClassifierParams, compute_cam, fuse, topk_avg_pool
from .tensor import Tensor


@dataclass
class Projector:
    """Stack of affine+relu layers; an empty stack is the identity."""

    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def init(cls, sizes: list[int], rng: np.random.Generator) -> "Projector":
        ws = [Tensor(glorot(rng, a, b), requires_grad=True) for a, b in zip(sizes[:-1], sizes[1:])]
        bs = [Tensor(np.zeros(b), requires_grad=True) for b in sizes[1:]]
        return cls(ws, bs)

    def __call__(self, x: Tensor, relu_last: bool = True) -> Tensor:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = T.add(T.matmul(x, w), b)
            if i < last or relu_last:
                x = T.relu(x)
        return x

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out


@dataclass
class ForwardResult:
    logits: Tensor
    p_v: Tensor | None = None
    p_l: Tensor | None = None
    cam_v: Cam | None = None
    cam_l: Cam | None = None
    z_v: Tensor | None = None
    z_l: Tensor | None = None


def _restore(x: Tensor, perm: np.ndarray) -> Tensor:
    inv = np.empty_like(perm)
    np.put_along_axis(inv, perm, np.broadcast_to(np.arange(perm.shape[1]), perm.shape), axis=1)
    return T.take_rows(x, inv)


def _canonical(x: np.ndarray, mask: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    if mask is not None:
        x = np.where(mask[:, :, None], x, 0.0)
    perm = canonical_order(x, mask)
    return np.take_along_axis(x, perm[:, :, None], axis=1), perm


class FusionModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.global_proj = Projector.init([c.d_global, c.hidden, c.dim], rng)
        self.text_proj = Projector.init([c.d_text, c.hidden, c.dim], rng)
        local_sizes = [c.d_local] if c.d_local == c.dim else [c.d_local, c.hidden, c.dim]
        self.local_proj = Projector.init(local_sizes, rng)
        self.self_attn = MultiHeadParams.init(c.dim, c.heads, rng)
        self.vision_attn = MultiHeadParams.init(c.dim, c.heads, rng)
        self.text_attn = MultiHeadParams.init(c.dim, c.heads, rng)
        self.vision_cls = ClassifierParams.init(c.dim, c.num_classes, rng, c.dropout)
        self.text_cls = ClassifierParams.init(c.dim, c.num_classes, rng, c.dropout)
        self.global_cls = ClassifierParams.init(c.dim, c.num_classes, rng, c.dropout)

    def parameters(self) -> dict[str, Tensor]:
        """Trainable tensors of the active configuration, in a stable order."""
        c = self.config
        out: dict[str, Tensor] = {}
        out.update(self.global_proj.named("global_proj"))
        if c.global_only:
            out.update(self.global_cls.named("global_cls"))
            return out
        if c.use_vision:
            out.update(self.local_proj.named("local_proj"))
            out.update(self.self_attn.named("self_attn"))
            out.update(self.vision_attn.named("vision_attn"))
            out.update(self.vision_cls.named("vision_cls"))
        if c.use_text:
            out.update(self.text_proj.named("text_proj"))
            out.update(self.text_attn.named("text_attn"))
            out.update(self.text_cls.named("text_cls"))
        return out

    def all_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix in ("global_proj", "text_proj", "local_proj", "self_attn", "vision_attn",
                       "text_attn", "vision_cls", "text_cls", "global_cls"):
            out.update(getattr(self, prefix).named(prefix))
        return out

    def _check(self, batch: Batch) -> None:
        c = self.config
        want = {"global_": (c.t, c.d_global), "local": (c.n, c.d_local), "text": (c.s, c.d_text)}
        for name, dims in want.items():
            got = getattr(batch, name).shape[1:]
            if got != dims:
                raise ShapeError(f"{name} features: expected {dims}, got {got}")

    def encode_global(self, batch: Batch) -> Tensor:
        g, _ = _canonical(batch.global_, None)
        return self.global_proj(Tensor(g))

    def vision_branch(self, batch: Batch, xg: Tensor, training: bool = False,
                      rng: np.random.Generator | None = None) -> tuple[Cam, Tensor]:
        x, perm = _canonical(batch.local, batch.local_mask)
        mask = np.take_along_axis(batch.local_mask, perm, axis=1)
        xv = self.local_proj(Tensor(x))
        zv = cross_attention(self_attention(xv, self.self_attn, mask), xg, self.vision_attn)
        cam = compute_cam(zv, mask, self.vision_cls, training, rng)
        return Cam(_restore(cam.scores, perm), batch.local_mask), _restore(zv, perm)

    def text_branch(self, batch: Batch, xg: Tensor, training: bool = False,
                    rng: np.random.Generator | None = None) -> tuple[Cam, Tensor]:
        x, perm = _canonical(batch.text, batch.text_mask)
        mask = np.take_along_axis(batch.text_mask, perm, axis=1)
        zl = cross_attention(self.text_proj(Tensor(x)), xg, self.text_attn)
        cam = compute_cam(zl, mask, self.text_cls, training, rng)
        return Cam(_restore(cam.scores, perm), batch.text_mask), _restore(zl, perm)

    def forward(self, batch: Batch, training: bool = False,
                rng: np.random.Generator | None = None) -> ForwardResult:
        self._check(batch)
        c = self.config
        xg = self.encode_global(batch)
        if c.global_only:
            pooled = T.reshape(T.mean_over_axis(xg, 1), (xg.shape[0], 1, c.dim))
            cam = compute_cam(pooled, np.ones((xg.shape[0], 1), dtype=bool), self.global_cls, training, rng)
            return ForwardResult(logits=T.reshape(cam.scores, (xg.shape[0], c.num_classes)))
        res = ForwardResult(logits=None)
        if c.use_vision:
            res.cam_v, res.z_v = self.vision_branch(batch, xg, training, rng)
            res.p_v = topk_avg_pool(res.cam_v, c.k)
        if c.use_text:
            res.cam_l, res.z_l = self.text_branch(batch, xg, training, rng)
            res.p_l = topk_avg_pool(res.cam_l, c.k_hat)
        if res.p_v is None:
            res.logits = res.p_l
        elif res.p_l is None:
            res.logits = res.p_v
        else:
            res.logits = fuse(res.p_v, res.p_l, c.lam)
        return res

    def ablation_forward(self, batch: Batch, use_vision: bool, use_text: bool,
                         training: bool = False, rng: np.random.Generator | None = None) -> ForwardResult:
        """Forward with branch toggles; both off means the global-only baseline."""
        saved = (self.config.use_vision, self.config.use_text, self.config.global_only)
        c = self.config
        c.use_vision, c.use_text = use_vision, use_text
        c.global_only = not (use_vision or use_text)
        try:
            return self.forward(batch, training, rng)
        finally:
            c.use_vision, c.use_text, c.global_only = saved
