"""Feature bundles, dataset manifests and the object bag.

Bundle layout (``FDB1``), all integers little-endian::

    magic "FDB1" | u16 version | u32 t, n, s, d_global, d_local, d_text, C
    u32 len + utf-8 sample id
    n bytes local mask | s bytes text mask | C bytes label
    float64 global (t*d_global) | local (n*d_local) | text (s*d_text), row-major
    s x (u32 len + utf-8 description)
"""

from __future__ import annotations

import json
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DataError, FormatError

BUNDLE_MAGIC = b"FDB1"
BUNDLE_VERSION = 1
MANIFEST_VERSION = 1
DIM_NAMES = ("t", "n", "s", "d_global", "d_local", "d_text")


@dataclass
class FeatureBundle:
    sample_id: str
    global_: np.ndarray
    local: np.ndarray
    local_mask: np.ndarray
    text: np.ndarray
    text_mask: np.ndarray
    label: np.ndarray
    descriptions: list[str] = field(default_factory=list)

    def dims(self) -> dict[str, int]:
        return dict(t=self.global_.shape[0], n=self.local.shape[0], s=self.text.shape[0],
                    d_global=self.global_.shape[1], d_local=self.local.shape[1],
                    d_text=self.text.shape[1])

    def validate(self, dims: dict[str, int] | None = None, num_classes: int | None = None,
                 multi_label: bool | None = None) -> None:
        if self.local_mask.shape != (self.local.shape[0],):
            raise DataError(f"{self.sample_id}: local mask length {self.local_mask.shape} "
                            f"vs {self.local.shape[0]} instances")
        if self.text_mask.shape != (self.text.shape[0],):
            raise DataError(f"{self.sample_id}: text mask length {self.text_mask.shape} "
                            f"vs {self.text.shape[0]} descriptions")
        for name, x, m in (("local", self.local, self.local_mask), ("text", self.text, self.text_mask)):
            if np.any(x[~m.astype(bool)] != 0):
                raise DataError(f"{self.sample_id}: padded {name} rows must be all zero")
        if dims is not None:
            got = self.dims()
            for key in DIM_NAMES:
                if got[key] != dims[key]:
                    raise FormatError(f"expected {dims[key]}, got {got[key]}", field=key)
        if num_classes is not None and self.label.shape != (num_classes,):
            raise FormatError(f"expected {num_classes} classes, got {self.label.shape[0]}", field="C")
        if multi_label is not None:
            pos = int(self.label.sum())
            if multi_label and pos < 1:
                raise DataError(f"{self.sample_id}: multi-label sample without a positive class")
            if not multi_label and pos != 1:
                raise DataError(f"{self.sample_id}: single-label sample with {pos} positives")


@dataclass
class Batch:
    global_: np.ndarray
    local: np.ndarray
    local_mask: np.ndarray
    text: np.ndarray
    text_mask: np.ndarray
    labels: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.global_.shape[0]

    @classmethod
    def stack(cls, bundles: Iterable[FeatureBundle]) -> "Batch":
        bundles = list(bundles)
        return cls(
            global_=np.stack([b.global_ for b in bundles]),
            local=np.stack([b.local for b in bundles]),
            local_mask=np.stack([b.local_mask.astype(bool) for b in bundles]),
            text=np.stack([b.text for b in bundles]),
            text_mask=np.stack([b.text_mask.astype(bool) for b in bundles]),
            labels=np.stack([b.label.astype(np.float64) for b in bundles]),
            ids=[b.sample_id for b in bundles],
        )

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(self.global_[idx], self.local[idx], self.local_mask[idx], self.text[idx],
                     self.text_mask[idx], self.labels[idx], [self.ids[i] for i in idx])


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_bundle(b: FeatureBundle) -> bytes:
    d = b.dims()
    parts = [BUNDLE_MAGIC, struct.pack("<H", BUNDLE_VERSION),
             struct.pack("<7I", *(d[k] for k in DIM_NAMES), b.label.shape[0]),
             _pack_str(b.sample_id),
             b.local_mask.astype(np.uint8).tobytes(), b.text_mask.astype(np.uint8).tobytes(),
             b.label.astype(np.uint8).tobytes()]
    for arr in (b.global_, b.local, b.text):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    descs = list(b.descriptions) + [""] * (d["s"] - len(b.descriptions))
    if len(descs) != d["s"]:
        raise DataError(f"{b.sample_id}: {len(b.descriptions)} descriptions for s={d['s']}")
    parts.extend(_pack_str(x) for x in descs)
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        if size < 0 or self.pos + size > len(self.raw):
            raise FormatError(f"truncated at byte {self.pos} (need {size} more)", field=what)
        out = self.raw[self.pos:self.pos + size]
        self.pos += size
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what: str) -> str:
        (size,) = self.unpack("<I", what)
        try:
            return self.take(size, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid utf-8: {exc}", field=what) from None


def decode_bundle(raw: bytes) -> FeatureBundle:
    r = _Reader(raw)
    if r.take(4, "magic") != BUNDLE_MAGIC:
        raise FormatError("bad magic, not an FDB1 bundle", field="magic")
    (version,) = r.unpack("<H", "version")
    if version != BUNDLE_VERSION:
        raise FormatError(f"unsupported version {version}", field="version")
    t, n, s, dg, dv, dl, c = r.unpack("<7I", "dims")
    sample_id = r.string("sample_id")

    def mask(count, what):
        return np.frombuffer(r.take(count, what), dtype=np.uint8).astype(bool)

    local_mask, text_mask = mask(n, "local_mask"), mask(s, "text_mask")
    label = np.frombuffer(r.take(c, "label"), dtype=np.uint8).astype(np.int64)

    def mat(rows, cols, what):
        return np.frombuffer(r.take(rows * cols * 8, what), dtype="<f8").astype(np.float64).reshape(rows, cols)

    g, loc, txt = mat(t, dg, "global"), mat(n, dv, "local"), mat(s, dl, "text")
    descriptions = [r.string(f"description[{i}]") for i in range(s)]
    if r.pos != len(raw):
        raise FormatError(f"{len(raw) - r.pos} trailing bytes", field="eof")
    return FeatureBundle(sample_id, g, loc, local_mask, txt, text_mask, label, descriptions)


def write_bundle(path: str | Path, bundle: FeatureBundle) -> None:
    Path(path).write_bytes(encode_bundle(bundle))


def read_bundle(path: str | Path, dims: dict[str, int] | None = None,
                num_classes: int | None = None) -> FeatureBundle:
    b = decode_bundle(Path(path).read_bytes())
    if dims is not None or num_classes is not None:
        b.validate(dims, num_classes)
    return b


@dataclass
class SampleEntry:
    id: str
    bundle: str
    label: list[int]
    split: str = "train"
    descriptions: list[str] = field(default_factory=list)
    image: str | None = None


@dataclass
class DatasetManifest:
    name: str
    num_classes: int
    class_names: list[str]
    multi_label: bool
    dims: dict[str, int]
    samples: list[SampleEntry]
    root: Path = Path(".")

    def validate(self, check_files: bool = True) -> None:
        if self.num_classes < 1:
            raise FormatError("must be >= 1", field="num_classes")
        if len(self.class_names) != self.num_classes:
            raise FormatError(f"{len(self.class_names)} names for {self.num_classes} classes",
                              field="class_names")
        for key in DIM_NAMES:
            v = self.dims.get(key)
            if not isinstance(v, int) or v < 1:
                raise FormatError(f"must be a positive integer, got {v!r}", field=f"dims.{key}")
        seen = set()
        for i, s in enumerate(self.samples):
            where = f"samples[{i}]"
            if s.id in seen:
                raise FormatError(f"duplicate sample id {s.id!r}", field=f"{where}.id")
            seen.add(s.id)
            if len(s.label) != self.num_classes:
                raise FormatError(f"label length {len(s.label)} != {self.num_classes}", field=f"{where}.label")
            if len(s.descriptions) > self.dims["s"]:
                raise FormatError(f"{len(s.descriptions)} descriptions > s={self.dims['s']}",
                                  field=f"{where}.descriptions")
            if check_files and not (self.root / s.bundle).is_file():
                raise FormatError(f"missing bundle file {s.bundle}", field=f"{where}.bundle")

    def split(self, name: str | None) -> list[SampleEntry]:
        if name is None or name == "all":
            return list(self.samples)
        return [s for s in self.samples if s.split == name]

    def to_json(self) -> dict:
        return {
            "format_version": MANIFEST_VERSION,
            "name": self.name,
            "num_classes": self.num_classes,
            "class_names": self.class_names,
            "multi_label": self.multi_label,
            "dims": self.dims,
            "samples": [vars(s) for s in self.samples],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"not valid JSON: {exc}", field="manifest") from None
        for key in ("name", "num_classes", "class_names", "multi_label", "dims", "samples"):
            if key not in d:
                raise FormatError("missing", field=key)
        if d.get("format_version", MANIFEST_VERSION) != MANIFEST_VERSION:
            raise FormatError(f"unsupported version {d['format_version']}", field="format_version")
        samples = []
        for i, s in enumerate(d["samples"]):
            try:
                samples.append(SampleEntry(**s))
            except TypeError as exc:
                raise FormatError(str(exc), field=f"samples[{i}]") from None
        m = cls(d["name"], d["num_classes"], list(d["class_names"]), bool(d["multi_label"]),
                dict(d["dims"]), samples, root=path.parent)
        m.validate(check_files)
        return m


def load_split(manifest: DatasetManifest, split: str | None = "train") -> Batch:
    entries = manifest.split(split)
    if not entries:
        raise DataError(f"split {split!r} of {manifest.name!r} is empty")
    bundles = []
    for e in entries:
        b = read_bundle(manifest.root / e.bundle)
        b.validate(manifest.dims, manifest.num_classes, manifest.multi_label)
        if b.sample_id != e.id:
            raise FormatError(f"bundle holds {b.sample_id!r}, manifest says {e.id!r}", field="sample_id")
        if list(b.label) != list(e.label):
            raise FormatError(f"{e.id}: bundle label {list(b.label)} != manifest {e.label}", field="label")
        bundles.append(b)
    return Batch.stack(bundles)


def sidecar_path(manifest: DatasetManifest, sample: SampleEntry, kind: str) -> Path:
    """Per-sample structured text file next to the bundle, e.g. ``<id>.pseudo.json``."""
    return (manifest.root / sample.bundle).with_name(f"{sample.id}.{kind}.json")


def write_pseudo_cam(path: str | Path, matrix: np.ndarray, mask: np.ndarray,
                     class_names: list[str]) -> None:
    Path(path).write_text(json.dumps({
        "class_names": class_names,
        "mask": [int(v) for v in mask],
        "matrix": [[int(v) for v in row] for row in matrix],
    }) + "\n")


def read_pseudo_cam(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        d = json.loads(Path(path).read_text())
        matrix = np.asarray(d["matrix"], dtype=np.float64)
        mask = np.asarray(d["mask"], dtype=bool)
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise FormatError(f"bad pseudo CAM file {path}: {exc}", field="pseudo_cam") from None
    if matrix.ndim != 2 or matrix.shape[0] != mask.shape[0]:
        raise FormatError(f"matrix {matrix.shape} vs mask {mask.shape}", field="pseudo_cam")
    return matrix, mask


def load_pseudo_cams(manifest: DatasetManifest, split: str | None = "train",
                     kind: str = "pseudo") -> np.ndarray:
    """Stack cached pseudo CAMs; ``kind`` is ``pseudo`` (VLM) or ``oracle`` (generator)."""
    out = []
    for e in manifest.split(split):
        path = sidecar_path(manifest, e, kind)
        if not path.is_file():
            raise DataError(f"no pseudo CAM cached for {e.id} ({path})")
        matrix, _ = read_pseudo_cam(path)
        out.append(matrix)
    return np.stack(out)


# object bag --------------------------------------------------------------

DEFAULT_LEXICON = {
    "car": "car", "cars": "car", "vehicle": "car", "vehicles": "car", "suv": "car",
    "truck": "truck", "trucks": "truck", "bus": "bus", "buses": "bus", "van": "car",
    "pedestrian": "pedestrian", "pedestrians": "pedestrian", "person": "pedestrian",
    "people": "pedestrian", "man": "pedestrian", "woman": "pedestrian",
    "cyclist": "cyclist", "bicycle": "cyclist", "bike": "cyclist", "motorcycle": "motorcycle",
    "traffic light": "traffic light", "traffic lights": "traffic light", "light": "light",
    "stop sign": "traffic sign", "sign": "traffic sign", "signs": "traffic sign",
    "crosswalk": "crosswalk", "lane": "lane", "lanes": "lane", "road": "road",
    "intersection": "intersection", "building": "building", "buildings": "building",
    "tree": "tree", "trees": "tree", "pole": "pole", "barrier": "barrier", "cone": "cone",
}

# Placeholder six-way grouping; the original grouping rules are not available.
DEFAULT_SUPERCATEGORIES = {
    "car": "vehicle", "truck": "vehicle", "bus": "vehicle", "motorcycle": "vehicle",
    "pedestrian": "person", "cyclist": "person",
    "traffic light": "traffic control", "traffic sign": "traffic control", "light": "traffic control",
    "crosswalk": "road structure", "lane": "road structure", "road": "road structure",
    "intersection": "road structure",
    "barrier": "obstacle", "cone": "obstacle", "pole": "obstacle",
    "building": "scenery", "tree": "scenery",
}


@dataclass
class ObjectBag:
    entries: list[tuple[str, int]]

    @property
    def categories(self) -> list[str]:
        return [c for c, _ in self.entries]

    def to_json(self) -> list[dict]:
        return [{"category": c, "count": n} for c, n in self.entries]


def count_categories(corpus: Iterable[str], lexicon: dict[str, str]) -> Counter:
    forms = sorted(lexicon, key=lambda f: (-len(f), f))
    pattern = re.compile(r"\b(" + "|".join(re.escape(f.lower()) for f in forms) + r")\b")
    lookup = {f.lower(): cat.lower().strip() for f, cat in lexicon.items()}
    counts: Counter = Counter()
    for text in corpus:
        for m in pattern.finditer(text.lower()):
            counts[lookup[m.group(1)]] += 1
    return counts


def build_object_bag(corpus: Iterable[str], lexicon: dict[str, str] | None = None,
                     size: int = 10) -> ObjectBag:
    """Most frequent categories across the corpus; ties break alphabetically."""
    corpus = [c for c in corpus if c and c.strip()]
    if not corpus:
        raise DataError("object bag needs a non-empty description corpus")
    counts = count_categories(corpus, lexicon or DEFAULT_LEXICON)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return ObjectBag(ranked[:size])


def supercategory_counts(counts: Counter, mapping: dict[str, str] | None = None) -> Counter:
    mapping = mapping or DEFAULT_SUPERCATEGORIES
    out: Counter = Counter()
    for cat, n in counts.items():
        out[mapping.get(cat, "other")] += n
    return out
