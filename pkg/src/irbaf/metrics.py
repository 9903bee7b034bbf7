"""Confusion-matrix accumulation and per-class IoU / accuracy reports."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    """``counts[g, p]`` = number of pixels with ground truth ``g`` predicted as ``p``."""

    num_classes: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        if self.counts.shape != (self.num_classes, self.num_classes):
            raise MetricsError(f"counts shape {self.counts.shape} != ({self.num_classes}, {self.num_classes})")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, pred, gt) -> "ConfusionMatrix":
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise MetricsError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
        k = self.num_classes
        for name, arr in (("prediction", pred), ("ground truth", gt)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise MetricsError(f"{name} holds class id outside [0, {k})")
        idx = gt.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise MetricsError("cannot merge matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    __add__ = merge


def accumulate(cm: ConfusionMatrix, pred_mask, gt_mask) -> ConfusionMatrix:
    """Return a new matrix with the pixel pairs of one prediction added."""
    return ConfusionMatrix(cm.num_classes, cm.counts.copy()).update(pred_mask, gt_mask)


@dataclass
class MetricsReport:
    iou_per_class: dict[int, float]
    acc_per_class: dict[int, float]
    miou: float
    macc: float
    pixel_count: int

    def to_dict(self) -> dict:
        return {
            "iou_per_class": {str(c): v for c, v in sorted(self.iou_per_class.items())},
            "acc_per_class": {str(c): v for c, v in sorted(self.acc_per_class.items())},
            "miou": self.miou,
            "macc": self.macc,
            "pixel_count": self.pixel_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            {int(c): float(v) for c, v in d["iou_per_class"].items()},
            {int(c): float(v) for c, v in d["acc_per_class"].items()},
            float(d["miou"]),
            float(d["macc"]),
            int(d["pixel_count"]),
        )


def exact_mean(fracs: list[Fraction]) -> float:
    return float(sum(fracs, Fraction(0)) / len(fracs)) if fracs else 0.0


def report(cm: ConfusionMatrix) -> MetricsReport:
    """IoU and recall per class; classes with an empty union are left out of the means.

    Ratios are formed from the integer counts so every value is the correctly
    rounded float of the exact quotient.
    """
    if cm.total == 0:
        raise MetricsError("empty confusion matrix")
    counts = cm.counts
    rows, cols = counts.sum(axis=1), counts.sum(axis=0)
    ious, accs = {}, {}
    for c in range(cm.num_classes):
        tp = int(counts[c, c])
        union = int(rows[c] + cols[c]) - tp
        if union > 0:
            ious[c] = Fraction(tp, union)
        if rows[c] > 0:
            accs[c] = Fraction(tp, int(rows[c]))
    return MetricsReport(
        {c: float(v) for c, v in ious.items()},
        {c: float(v) for c, v in accs.items()},
        exact_mean(list(ious.values())),
        exact_mean(list(accs.values())),
        cm.total,
    )


def format_row(label: str, rep: MetricsReport, classes: list[int]) -> str:
    """One table line: IoU per class, mIoU, accuracy per class, mAcc (percent)."""

    def pct(d, c):
        return f"{100 * d[c]:8.3f}" if c in d else "       -"

    ious = " ".join(pct(rep.iou_per_class, c) for c in classes)
    accs = " ".join(pct(rep.acc_per_class, c) for c in classes)
    return f"{label:>10} | {ious} | {100 * rep.miou:8.3f} | {accs} | {100 * rep.macc:8.3f}"
