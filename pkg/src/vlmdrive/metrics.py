"""Per-class F1, micro F1 over all class decisions (F1_all) and macro mF1."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import UsageError


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionCounts":
        return cls(*(np.zeros(num_classes, dtype=np.int64) for _ in range(4)))

    @property
    def num_classes(self) -> int:
        return self.tp.shape[0]

    def accumulate(self, decisions, label) -> "ConfusionCounts":
        d = np.asarray(decisions).astype(bool)
        y = np.asarray(label).astype(bool)
        if d.shape != (self.num_classes,) or y.shape != (self.num_classes,):
            raise UsageError(f"expected {self.num_classes} classes, got {d.shape} and {y.shape}")
        self.tp += d & y
        self.fp += d & ~y
        self.fn += ~d & y
        self.tn += ~d & ~y
        return self

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def accumulate(decisions, label, counts: ConfusionCounts) -> ConfusionCounts:
    return counts.accumulate(decisions, label)


def _f1(tp, fp, fn) -> np.ndarray:
    tp, fp, fn = (np.asarray(x, dtype=np.float64) for x in (tp, fp, fn))
    denom = 2 * tp + fp + fn
    return np.divide(2 * tp, denom, out=np.zeros_like(denom), where=denom > 0)


def f1_report(counts: ConfusionCounts) -> dict:
    per_class = _f1(counts.tp, counts.fp, counts.fn)
    f1_all = float(_f1(counts.tp.sum(), counts.fp.sum(), counts.fn.sum()))
    return {"per_class_f1": per_class.tolist(), "f1_all": f1_all, "mf1": float(per_class.mean())}


def format_report(report: dict, class_names: list[str], title: str = "") -> str:
    heads = list(class_names) + ["F1_all", "mF1"]
    vals = list(report["per_class_f1"]) + [report["f1_all"], report["mf1"]]
    width = max(8, *(len(h) + 2 for h in heads))
    lines = []
    if title:
        lines.append(title)
    lines.append("".join(h.rjust(width) for h in heads))
    lines.append("".join(f"{v:.3f}".rjust(width) for v in vals))
    return "\n".join(lines)


def write_report(path, report: dict, class_names: list[str]) -> None:
    with open(path, "w") as fh:
        json.dump({"class_names": class_names, **report}, fh, indent=1, sort_keys=True)
        fh.write("\n")
