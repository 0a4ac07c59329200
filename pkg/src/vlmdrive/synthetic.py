"""Planted-signal synthetic datasets.

Every positive class of a sample gets ``planted`` local rows and one text row
drawn from a class-specific direction plus isotropic noise. Everything else is
pure noise, so the generator knows which instances *should* explain each
decision and can emit oracle pseudo CAMs for the refinement phase.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (DatasetManifest, FeatureBundle, SampleEntry, sidecar_path, write_bundle,
                   write_pseudo_cam)
from .errors import ConfigError

OBJECT_WORDS = ["car", "pedestrian", "traffic light", "truck", "cyclist", "bus", "sign", "lane"]
FILLER_WORDS = ["building", "tree", "pole", "road", "cone", "barrier"]


@dataclass
class SyntheticSpec:
    n_train: int = 2000
    n_eval: int = 500
    num_classes: int = 4
    t: int = 4
    n: int = 16
    s: int = 8
    d_global: int = 64
    d_local: int = 64
    d_text: int = 64
    planted: int = 2
    noise: float = 1.0
    signal: float = 4.0
    global_signal: float = 1.0
    hallucination: float = 0.0
    class_prior: list[float] = field(default_factory=lambda: [0.5, 0.4, 0.3, 0.3])
    multi_label: bool = True
    class_names: list[str] | None = None
    name: str = "synthetic"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_train + self.n_eval < 1:
            raise ConfigError("n_train + n_eval must be >= 1")
        if self.n_train < 0 or self.n_eval < 0:
            raise ConfigError("sample counts must be non-negative")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        for key in ("t", "n", "s", "d_global", "d_local", "d_text"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.planted < 1 or self.planted * self.num_classes > self.n:
            raise ConfigError(f"planted={self.planted} x {self.num_classes} classes exceeds n={self.n}")
        if self.num_classes + 1 > self.s:
            raise ConfigError(f"s={self.s} too small for {self.num_classes} planted descriptions")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if not 0 <= self.hallucination <= 1:
            raise ConfigError("hallucination must lie in [0, 1]")
        if len(self.class_prior) != self.num_classes:
            raise ConfigError(f"class_prior has {len(self.class_prior)} entries for {self.num_classes} classes")
        if any(not 0 < p <= 1 for p in self.class_prior):
            raise ConfigError("class_prior entries must lie in (0, 1]")
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise ConfigError("class_names length must equal num_classes")

    def names(self) -> list[str]:
        if self.class_names:
            return list(self.class_names)
        if self.num_classes == 4:
            return ["F", "S", "L", "R"]
        return [f"c{i}" for i in range(self.num_classes)]

    def expected_marginals(self) -> np.ndarray:
        """Per-class positive rate after conditioning on at least one positive."""
        p = np.asarray(self.class_prior, dtype=np.float64)
        if not self.multi_label:
            return p / p.sum()
        return p / (1.0 - np.prod(1.0 - p))


def _unit_directions(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    d = rng.standard_normal((count, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass
class SyntheticDataset:
    manifest: DatasetManifest
    directions: dict[str, np.ndarray]


def _draw_label(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    p = np.asarray(spec.class_prior, dtype=np.float64)
    if not spec.multi_label:
        y = np.zeros(spec.num_classes, dtype=np.int64)
        y[rng.choice(spec.num_classes, p=p / p.sum())] = 1
        return y
    while True:
        y = (rng.random(spec.num_classes) < p).astype(np.int64)
        if y.any():
            return y


def generate_sample(rng: np.random.Generator, spec: SyntheticSpec, dirs: dict[str, np.ndarray],
                    sample_id: str) -> tuple[FeatureBundle, dict, np.ndarray]:
    names = spec.names()
    y = _draw_label(rng, spec)
    pos = np.flatnonzero(y)

    n_valid = int(rng.integers(max(spec.planted * spec.num_classes, spec.n // 2), spec.n + 1))
    local = np.zeros((spec.n, spec.d_local))
    local[:n_valid] = spec.noise * rng.standard_normal((n_valid, spec.d_local))
    slots = rng.permutation(n_valid)
    planted_v = {}
    for j, c in enumerate(pos):
        rows = np.sort(slots[j * spec.planted:(j + 1) * spec.planted])
        local[rows] += dirs["local"][c]
        planted_v[names[c]] = rows.tolist()
    local_mask = np.arange(spec.n) < n_valid

    s_valid = int(rng.integers(max(spec.num_classes + 1, spec.s // 2), spec.s + 1))
    text = np.zeros((spec.s, spec.d_text))
    text[:s_valid] = spec.noise * rng.standard_normal((s_valid, spec.d_text))
    tslots = rng.permutation(s_valid)
    descriptions = [""] * spec.s
    for i in range(s_valid):
        descriptions[i] = f"a {FILLER_WORDS[int(rng.integers(len(FILLER_WORDS)))]} in the background"
    pseudo = np.zeros((spec.s, spec.num_classes), dtype=np.int64)
    planted_t = {}
    for j, c in enumerate(pos):
        row = int(tslots[j])
        text[row] += dirs["text"][c]
        pseudo[row, c] = 1
        planted_t[names[c]] = [row]
        descriptions[row] = f"the {OBJECT_WORDS[c % len(OBJECT_WORDS)]} ahead matters for {names[c]}"
    hallucinated = []
    neg = np.flatnonzero(y == 0)
    if neg.size and len(pos) < s_valid and rng.random() < spec.hallucination:
        c = int(rng.choice(neg))
        row = int(tslots[len(pos)])
        text[row] += dirs["text"][c]
        hallucinated.append(row)
        descriptions[row] = f"the {OBJECT_WORDS[c % len(OBJECT_WORDS)]} ahead matters for {names[c]}"
    text_mask = np.arange(spec.s) < s_valid

    glob = spec.noise * rng.standard_normal((spec.t, spec.d_global))
    glob += spec.global_signal * dirs["global"][pos].sum(axis=0) / np.sqrt(len(pos))

    bundle = FeatureBundle(sample_id, glob, local, local_mask, text, text_mask, y, descriptions)
    planted = {"vision": planted_v, "text": planted_t, "hallucinated_text": hallucinated}
    return bundle, planted, pseudo


def generate_synthetic(spec: SyntheticSpec, seed: int, out_dir: str | Path) -> SyntheticDataset:
    """Write manifest, bundles, planted ground truth and oracle pseudo CAMs under ``out_dir``."""
    spec.validate()
    out = Path(out_dir)
    (out / "bundles").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    dirs = {
        "local": spec.signal * _unit_directions(rng, spec.num_classes, spec.d_local),
        "text": spec.signal * _unit_directions(rng, spec.num_classes, spec.d_text),
        "global": _unit_directions(rng, spec.num_classes, spec.d_global),
    }
    names = spec.names()
    manifest = DatasetManifest(
        name=spec.name, num_classes=spec.num_classes, class_names=names,
        multi_label=spec.multi_label,
        dims=dict(t=spec.t, n=spec.n, s=spec.s, d_global=spec.d_global,
                  d_local=spec.d_local, d_text=spec.d_text),
        samples=[], root=out)
    total = spec.n_train + spec.n_eval
    for i in range(total):
        sid = f"syn{i:05d}"
        bundle, planted, pseudo = generate_sample(rng, spec, dirs, sid)
        entry = SampleEntry(id=sid, bundle=f"bundles/{sid}.fdb", label=bundle.label.tolist(),
                            split="train" if i < spec.n_train else "eval",
                            descriptions=[d for d, m in zip(bundle.descriptions, bundle.text_mask) if m])
        write_bundle(out / entry.bundle, bundle)
        manifest.samples.append(entry)
        sidecar_path(manifest, entry, "planted").write_text(json.dumps(planted, sort_keys=True) + "\n")
        write_pseudo_cam(sidecar_path(manifest, entry, "oracle"), pseudo, bundle.text_mask, names)
    manifest.save(out / "manifest.json")
    (out / "synthetic_spec.json").write_text(json.dumps(asdict(spec), indent=1, sort_keys=True) + "\n")
    return SyntheticDataset(manifest, dirs)


def load_planted(manifest: DatasetManifest, split: str | None = None) -> list[dict]:
    return [json.loads(sidecar_path(manifest, e, "planted").read_text()) for e in manifest.split(split)]


def explanation_precision(selected: list[list[np.ndarray]], planted: list[dict], labels: np.ndarray,
                          class_names: list[str]) -> float:
    """Fraction of top-k selected visual instances that are planted, over ground-truth positive classes.

    ``selected[b][c]`` holds the rows chosen for class ``c`` of sample ``b``
    (as returned by :func:`vlmdrive.mil.topk_indices`).
    """
    hit = total = 0
    for rows_per_class, truth, y in zip(selected, planted, labels):
        for c in np.flatnonzero(y):
            gold = set(truth["vision"].get(class_names[c], []))
            rows = [int(r) for r in rows_per_class[c]]
            hit += sum(r in gold for r in rows)
            total += len(rows)
    return hit / total if total else 0.0
