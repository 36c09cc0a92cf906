"""Segmentation and depth metrics plus report writing."""
from __future__ import annotations

import json
import math
from fractions import Fraction
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ConfusionMatrix:
    """K x K pixel counts; entry (i, j) = pixels of true class i predicted as j."""

    def __init__(self, num_classes: int, ignore_index: int = 255):
        self.num_classes = int(num_classes)
        self.ignore_index = ignore_index
        self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def add(self, pred, true) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        true = np.asarray(true)
        if pred.shape != true.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape} vs true {true.shape}")
        valid = true != self.ignore_index
        p = pred[valid].astype(np.int64)
        t = true[valid].astype(np.int64)
        k = self.num_classes
        for name, arr in (("pred", p), ("true", t)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                bad = int(arr[(arr < 0) | (arr >= k)][0])
                raise ValueError(f"{name} label {bad} outside [0, {k})")
        self.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        out = ConfusionMatrix(self.num_classes, self.ignore_index)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate_confusion(pred, true, ignore_index: int = 255, num_classes: int | None = None,
                         cm: ConfusionMatrix | None = None) -> ConfusionMatrix:
    if cm is None:
        if num_classes is None:
            raise ValueError("num_classes is required when starting a new confusion matrix")
        cm = ConfusionMatrix(num_classes, ignore_index)
    return cm.add(pred, true)


def per_class_iou(cm) -> np.ndarray:
    """IoU per class; NaN for classes absent from both prediction and truth."""
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    inter = np.diag(counts).astype(np.float64)
    union = counts.sum(0) + counts.sum(1) - np.diag(counts)
    iou = np.full(counts.shape[0], np.nan)
    present = union > 0
    iou[present] = inter[present] / union[present]
    return iou


def miou(cm) -> float:
    """Mean IoU over classes present in prediction or truth; NaN when none are.

    The mean is taken over exact rationals and rounded once, so it does not
    depend on summation order.
    """
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    inter = np.diag(counts)
    union = counts.sum(0) + counts.sum(1) - inter
    ious = [Fraction(int(i), int(u)) for i, u in zip(inter, union) if u > 0]
    if not ious:
        return math.nan
    return float(sum(ious) / len(ious))


def scale_aligned_abs_rel(pred, gt, valid=None, method: str = "median") -> float:
    """Mean |c * pred - gt| / gt after one global scale c aligns pred to gt.

    ``method``: 'median' (c = median(gt / pred)) or 'least_squares'.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    valid = np.ones(gt.shape, bool) if valid is None else np.asarray(valid, bool)
    if not valid.any():
        raise ValueError("empty valid mask")
    p, g = pred[valid], gt[valid]
    if (g <= 0).any():
        raise ValueError("ground truth must be positive on the valid mask")
    if (p <= 0).any():
        raise ValueError("predictions must be positive on the valid mask")
    if method == "median":
        c = np.median(g / p)
    elif method == "least_squares":
        c = np.dot(p, g) / np.dot(p, p)
    else:
        raise ValueError(f"unknown alignment method {method!r}")
    return float(np.mean(np.abs(c * p - g) / g))


def abs_rel(pred, gt, valid=None) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = gt > 0 if valid is None else np.asarray(valid, bool)
    return float(np.mean(np.abs(pred[valid] - gt[valid]) / gt[valid]))


def disparity_to_depth(disp, focal_baseline: float = 1.0) -> np.ndarray:
    disp = np.asarray(disp, dtype=np.float64)
    out = np.zeros_like(disp)
    pos = disp > 0
    out[pos] = focal_baseline / disp[pos]
    return out


# -- reports -----------------------------------------------------------------

@dataclass
class SegmentationReport:
    name: str
    miou: float
    per_class_iou: list
    class_names: list
    pixel_count: int
    dataset_hash: str = ""
    checkpoint_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "miou": None if math.isnan(self.miou) else self.miou,
            "per_class_iou": {n: (None if math.isnan(v) else v) for n, v in zip(self.class_names, self.per_class_iou)},
            "pixel_count": self.pixel_count,
            "dataset_hash": self.dataset_hash,
            "checkpoint_hash": self.checkpoint_hash,
        }

    @classmethod
    def from_confusion(cls, name: str, cm: ConfusionMatrix, class_names=None, **kw) -> "SegmentationReport":
        names = list(class_names) if class_names else [str(i) for i in range(cm.num_classes)]
        return cls(name, miou(cm), [float(v) for v in per_class_iou(cm)], names, cm.total, **kw)


def _fmt(v) -> str:
    return "undefined" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.4f}"


def write_report(out_dir, rows: list[dict], meta: dict | None = None) -> None:
    """Human-readable report.txt plus machine-readable report.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"meta": meta or {}, "rows": rows}
    (out / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    lines = []
    for key, value in sorted((meta or {}).items()):
        lines.append(f"{key}: {value}")
    for row in rows:
        lines.append("")
        lines.append(f"[{row.get('name', 'result')}]")
        for key, value in row.items():
            if key == "name":
                continue
            if isinstance(value, dict):
                lines.append(f"{key}:")
                for k, v in value.items():
                    lines.append(f"  {k}: {_fmt(v) if isinstance(v, float) or v is None else v}")
            elif isinstance(value, float) or value is None:
                lines.append(f"{key}: {_fmt(value)}")
            else:
                lines.append(f"{key}: {value}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
