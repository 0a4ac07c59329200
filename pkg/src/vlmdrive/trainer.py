"""Adam, the two training phases, evaluation helpers and checkpoint files.

Checkpoint layout (``FDCK``)::

    magic "FDCK" | u16 version | u32 header length | JSON header (utf-8)
    float64 little-endian blobs, in header table order
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .config import ModelConfig, TrainConfig
from .data import Batch
from .errors import DataError, FormatError, UsageError
from .metrics import ConfusionCounts, f1_report
from .mil import decide, mil_loss
from .model import FusionModel
from .refinement import SurrogateParams, predict_refined, refinement_loss, surrogate_forward
from .tensor import Tensor

log = logging.getLogger(__name__)

CKPT_MAGIC = b"FDCK"
CKPT_VERSION = 1


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise UsageError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    adam: AdamState
    epoch: int = 0
    surrogate: dict[str, np.ndarray] = field(default_factory=dict)
    surrogate_adam: AdamState | None = None
    metrics: dict = field(default_factory=dict)

    def build_model(self) -> FusionModel:
        model = FusionModel(self.model_config, seed=self.train_config.seed)
        current = model.all_parameters()
        missing = set(current) - set(self.params)
        if missing:
            raise FormatError(f"checkpoint lacks parameters {sorted(missing)}", field="params")
        for name, t in current.items():
            if t.data.shape != self.params[name].shape:
                raise FormatError(f"shape {self.params[name].shape} vs model {t.data.shape}", field=name)
            t.data = self.params[name].copy()
        return model

    def build_surrogate(self) -> SurrogateParams | None:
        if not self.surrogate:
            return None
        c = self.model_config
        sur = SurrogateParams.init(c.d_text, c.hidden, c.dim, np.random.default_rng(0))
        for name, t in sur.named().items():
            t.data = self.surrogate[name].copy()
        return sur

    def main_hash(self) -> str:
        return params_hash(self.params)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(encode_checkpoint(self))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"checkpoint not found: {path}")
        return decode_checkpoint(path.read_bytes())


def params_hash(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()


def _adam_header(state: AdamState | None) -> dict | None:
    if state is None:
        return None
    return dict(lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps, step=state.step)


def encode_checkpoint(ck: Checkpoint) -> bytes:
    table, blobs = [], []

    def put(group: str, arrays: dict[str, np.ndarray]):
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            table.append({"group": group, "name": name, "shape": list(arr.shape)})
            blobs.append(arr.tobytes())

    put("params", ck.params)
    put("adam.m", ck.adam.m)
    put("adam.v", ck.adam.v)
    put("surrogate", ck.surrogate)
    if ck.surrogate_adam is not None:
        put("surrogate_adam.m", ck.surrogate_adam.m)
        put("surrogate_adam.v", ck.surrogate_adam.v)
    header = {
        "model_config": ck.model_config.to_dict(),
        "train_config": ck.train_config.to_dict(),
        "epoch": ck.epoch,
        "adam": _adam_header(ck.adam),
        "surrogate_adam": _adam_header(ck.surrogate_adam),
        "metrics": ck.metrics,
        "tensors": table,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    return b"".join([CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(raw)), raw] + blobs)


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < 10:
        raise FormatError("file too short for a checkpoint header", field="header")
    if raw[:4] != CKPT_MAGIC:
        raise FormatError("bad magic, not an FDCK checkpoint", field="magic")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported version {version}", field="version")
    if 10 + hlen > len(raw):
        raise FormatError("truncated header", field="header")
    try:
        header = json.loads(raw[10:10 + hlen].decode("utf-8"))
        tensors = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"unreadable header: {exc}", field="header") from None
    try:
        return _decode_body(raw, header, tensors, 10 + hlen)
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, UsageError) as exc:
        raise FormatError(f"inconsistent header: {exc}", field="header") from None


def _decode_body(raw: bytes, header: dict, tensors: list, pos: int) -> Checkpoint:
    groups: dict[str, dict[str, np.ndarray]] = {}
    for entry in tensors:
        shape = tuple(int(d) for d in entry["shape"])
        if any(d < 0 for d in shape):
            raise FormatError(f"negative dimension in {shape}", field=f"{entry['group']}/{entry['name']}")
        size = int(np.prod(shape)) * 8
        if pos + size > len(raw):
            raise FormatError("truncated tensor data", field=f"{entry['group']}/{entry['name']}")
        arr = np.frombuffer(raw[pos:pos + size], dtype="<f8").astype(np.float64).reshape(shape)
        groups.setdefault(entry["group"], {})[entry["name"]] = arr
        pos += size
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes", field="eof")

    def adam(key: str, prefix: str) -> AdamState | None:
        h = header.get(key)
        if h is None:
            return None
        return AdamState(**h, m=groups.get(f"{prefix}.m", {}), v=groups.get(f"{prefix}.v", {}))

    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        train_config=TrainConfig.from_dict(header["train_config"]),
        params=groups.get("params", {}),
        adam=adam("adam", "adam") or AdamState(),
        epoch=int(header.get("epoch", 0)),
        surrogate=groups.get("surrogate", {}),
        surrogate_adam=adam("surrogate_adam", "surrogate_adam"),
        metrics=header.get("metrics", {}),
    )


def snapshot(model: FusionModel) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in model.all_parameters().items()}


def _copy_adam(state: AdamState) -> AdamState:
    return AdamState(state.lr, state.beta1, state.beta2, state.eps, state.step,
                     {k: v.copy() for k, v in state.m.items()}, {k: v.copy() for k, v in state.v.items()})


def _streams(seed: int, phase: str) -> tuple[np.random.Generator, np.random.Generator]:
    ss = np.random.SeedSequence([seed, 0 if phase == "main" else 1])
    shuffle, drop = ss.spawn(2)
    return np.random.default_rng(shuffle), np.random.default_rng(drop)


def predict_logits(model: FusionModel, data: Batch, chunk: int = 256) -> np.ndarray:
    out = []
    for lo in range(0, len(data), chunk):
        out.append(model.forward(data.subset(np.arange(lo, min(lo + chunk, len(data))))).logits.data)
    return np.concatenate(out)


def evaluate(model: FusionModel, data: Batch, surrogate: SurrogateParams | None = None,
             refined: bool = False, chunk: int = 256) -> dict:
    c = model.config
    counts = ConfusionCounts.zeros(c.num_classes)
    if refined:
        for lo in range(0, len(data), chunk):
            sub = data.subset(np.arange(lo, min(lo + chunk, len(data))))
            for out, y in zip(predict_refined(sub, model, surrogate), sub.labels):
                counts.accumulate(out.decisions, y)
    else:
        dec = decide(predict_logits(model, data, chunk), c.multi_label, c.threshold)
        for d, y in zip(dec, data.labels):
            counts.accumulate(d, y)
    return f1_report(counts)


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, size):
        yield order[lo:lo + size]


def train_main(data: Batch, model_config: ModelConfig, train_config: TrainConfig,
               eval_data: Batch | None = None, out_dir: str | Path | None = None,
               on_epoch: Callable[[dict], None] | None = None) -> Checkpoint:
    """Fit the fusion model by minimizing the MIL loss over shuffled mini-batches.

    Writes ``final.ckpt`` (and ``best.ckpt``, by eval mF1, when ``eval_data`` is
    given) into ``out_dir`` if set. Returns the final checkpoint.
    """
    if len(data) == 0:
        raise DataError("training set is empty")
    model = FusionModel(model_config, seed=train_config.seed)
    params = model.parameters()
    state = AdamState(train_config.lr, train_config.beta1, train_config.beta2, train_config.eps)
    shuffle_rng, drop_rng = _streams(train_config.seed, "main")
    best = (-1.0, None)
    history = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for epoch in range(1, train_config.epochs + 1):
        total, seen = 0.0, 0
        for idx in _batches(len(data), train_config.batch_size, shuffle_rng):
            batch = data.subset(idx)
            with T.Tape() as tape:
                res = model.forward(batch, training=True, rng=drop_rng)
                loss = mil_loss(res.logits, batch.labels, model_config.multi_label)
                tape.backward(loss)
            adam_step(params, {k: p.grad for k, p in params.items()}, state)
            for p in params.values():
                p.zero_grad()
            tape.clear()
            total += float(loss.data) * len(idx)
            seen += len(idx)
        row = {"phase": "main", "epoch": epoch, "loss": total / seen}
        if eval_data is not None:
            rep = evaluate(model, eval_data)
            row["eval_mf1"] = rep["mf1"]
            row["eval_f1_all"] = rep["f1_all"]
            if rep["mf1"] > best[0]:
                best = (rep["mf1"], Checkpoint(model_config, train_config, snapshot(model),
                                               _copy_adam(state), epoch, metrics=dict(rep)))
        history.append(row)
        log.info(" ".join(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
        if on_epoch is not None:
            on_epoch(row)
    final = Checkpoint(model_config, train_config, snapshot(model), state, train_config.epochs,
                       metrics={"history": history})
    if out is not None:
        final.save(out / "final.ckpt")
        if best[1] is not None:
            best[1].save(out / "best.ckpt")
    return final


def train_refinement(checkpoint: Checkpoint, data: Batch, pseudo_cams: np.ndarray | None,
                     train_config: TrainConfig, out_path: str | Path | None = None,
                     on_epoch: Callable[[dict], None] | None = None) -> Checkpoint:
    """Fit only the surrogate against pseudo CAMs; main-model parameters stay untouched."""
    if pseudo_cams is None:
        raise UsageError("refinement needs cached pseudo CAMs")
    pseudo_cams = np.asarray(pseudo_cams, dtype=np.float64)
    if pseudo_cams.shape[0] != len(data):
        raise UsageError(f"pseudo CAM cache covers {pseudo_cams.shape[0]} samples, split has {len(data)}")
    model = checkpoint.build_model()
    c = model.config
    seed_rng = np.random.default_rng(np.random.SeedSequence([train_config.seed, 2]))
    surrogate = SurrogateParams.init(c.d_text, c.hidden, c.dim, seed_rng)
    params = surrogate.named()
    state = AdamState(train_config.lr, train_config.beta1, train_config.beta2, train_config.eps)
    shuffle_rng, _ = _streams(train_config.seed, "refinement")
    history = []
    for epoch in range(1, train_config.epochs + 1):
        total, seen = 0.0, 0
        for idx in _batches(len(data), train_config.batch_size, shuffle_rng):
            batch = data.subset(idx)
            with T.Tape() as tape:
                cam = surrogate_forward(batch.text, batch.text_mask, surrogate, model.text_cls)
                loss = refinement_loss(cam, pseudo_cams[idx])
                tape.backward(loss)
            adam_step(params, {k: p.grad for k, p in params.items()}, state)
            for p in params.values():
                p.zero_grad()
            tape.clear()
            total += float(loss.data) * len(idx)
            seen += len(idx)
        row = {"phase": "refinement", "epoch": epoch, "loss": total / seen}
        history.append(row)
        log.info(" ".join(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
        if on_epoch is not None:
            on_epoch(row)
    out = Checkpoint(checkpoint.model_config, checkpoint.train_config,
                     {k: v.copy() for k, v in checkpoint.params.items()}, checkpoint.adam,
                     checkpoint.epoch, surrogate={k: p.data.copy() for k, p in params.items()},
                     surrogate_adam=state, metrics={**checkpoint.metrics, "refinement_history": history})
    if out_path is not None:
        out.save(out_path)
    return out
