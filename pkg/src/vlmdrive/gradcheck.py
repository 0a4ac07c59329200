"""Finite-difference check of the full model's analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .data import Batch
from .mil import mil_loss
from .model import FusionModel


def random_batch(config: ModelConfig, size: int, rng: np.random.Generator) -> Batch:
    """Random features with ragged masks (padded rows zeroed) and valid labels."""
    c = config
    local_mask = np.arange(c.n)[None, :] < rng.integers(max(1, c.n // 2), c.n + 1, size)[:, None]
    text_mask = np.arange(c.s)[None, :] < rng.integers(max(1, c.s // 2), c.s + 1, size)[:, None]
    local = rng.standard_normal((size, c.n, c.d_local)) * local_mask[..., None]
    text = rng.standard_normal((size, c.s, c.d_text)) * text_mask[..., None]
    if c.multi_label:
        labels = (rng.random((size, c.num_classes)) < 0.5).astype(np.float64)
        labels[np.arange(size), rng.integers(c.num_classes, size=size)] = 1.0
    else:
        labels = np.eye(c.num_classes)[rng.integers(c.num_classes, size=size)]
    return Batch(rng.standard_normal((size, c.t, c.d_global)), local, local_mask, text, text_mask,
                 labels, [f"g{i}" for i in range(size)])


@dataclass
class GradcheckReport:
    max_rel_error: float
    checked: int
    worst: str
    rows: list[tuple[str, tuple, float, float, float]]


def gradcheck(config: ModelConfig, seed: int = 0, num_params: int = 20, h: float = 1e-5,
              batch_size: int = 2) -> GradcheckReport:
    """Compare backprop against central differences on sampled parameter entries.

    Relative error is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    Every parameter tensor contributes at least one entry. Dropout is off.
    """
    rng = np.random.default_rng(seed)
    model = FusionModel(config, seed=seed)
    batch = random_batch(config, batch_size, rng)
    params = model.parameters()

    def loss_value() -> float:
        return float(mil_loss(model.forward(batch).logits, batch.labels, config.multi_label).data)

    with T.Tape() as tape:
        loss = mil_loss(model.forward(batch).logits, batch.labels, config.multi_label)
        tape.backward(loss)
    grads = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    tape.clear()
    for p in params.values():
        p.zero_grad()

    names = list(params)
    picks = names + [names[i] for i in rng.integers(len(names), size=max(0, num_params - len(names)))]
    rows = []
    for name in picks:
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.data.shape)
        orig = p.data[idx]
        p.data[idx] = orig + h
        up = loss_value()
        p.data[idx] = orig - h
        down = loss_value()
        p.data[idx] = orig
        numeric = (up - down) / (2 * h)
        analytic = float(grads[name][idx])
        err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        rows.append((name, idx, analytic, numeric, err))
    worst = max(rows, key=lambda r: r[4])
    return GradcheckReport(worst[4], len(rows), f"{worst[0]}{list(worst[1])}", rows)
