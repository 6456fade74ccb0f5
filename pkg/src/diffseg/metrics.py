"""Mean IoU and boundary IoU over accumulated counts.

Both metrics accumulate counts over a whole evaluation set before
dividing, and average only over classes that occur in the ground truth
or the predictions somewhere in that set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grids import GridError, check_labels

_SQUARE = ndimage.generate_binary_structure(2, 2)  # 3x3 square: Chebyshev-distance erosion


@dataclass
class ConfusionMatrix:
    """``counts[p, g]``: pixels predicted ``p`` whose true class is ``g``."""

    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def add(self, pred, gt) -> "ConfusionMatrix":
        pred, gt = _checked_pair(pred, gt, self.num_classes)
        K = self.num_classes
        self.counts += np.bincount(pred.ravel() * K + gt.ravel(), minlength=K * K).reshape(K, K)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def per_class_iou(self) -> np.ndarray:
        """IoU per class, NaN for classes absent from both predictions and ground truth."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)


@dataclass(frozen=True)
class IouResult:
    mean: float
    per_class: np.ndarray  # NaN marks an excluded class


def _checked_pair(pred, gt, num_classes: int):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise GridError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    return check_labels(pred, num_classes), check_labels(gt, num_classes)


def _mean(per_class: np.ndarray) -> float:
    present = per_class[~np.isnan(per_class)]
    return float(present.mean()) if present.size else math.nan


def miou(preds, gts, num_classes: int) -> IouResult:
    """Mean IoU over a list of prediction / ground-truth grids."""
    if len(preds) != len(gts):
        raise GridError(f"{len(preds)} predictions for {len(gts)} ground-truth grids")
    cm = ConfusionMatrix.empty(num_classes)
    for p, g in zip(preds, gts):
        cm.add(p, g)
    per = cm.per_class_iou()
    return IouResult(_mean(per), per)


def default_boundary_d(height: int, width: int) -> int:
    return max(1, round(0.02 * math.hypot(height, width)))


def boundary_band(mask: np.ndarray, d: int) -> np.ndarray:
    """Pixels of ``mask`` within Chebyshev distance ``d`` of a pixel outside it (image border counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    inner = ndimage.binary_erosion(mask, structure=_SQUARE, iterations=d, border_value=0)
    return mask & ~inner


@dataclass
class BoundaryCounts:
    intersection: np.ndarray
    union: np.ndarray
    present: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> "BoundaryCounts":
        return cls(np.zeros(num_classes, np.int64), np.zeros(num_classes, np.int64), np.zeros(num_classes, bool))

    def add(self, pred, gt, d: int) -> "BoundaryCounts":
        K = len(self.intersection)
        pred, gt = _checked_pair(pred, gt, K)
        for c in range(K):
            pm, gm = pred == c, gt == c
            if not (pm.any() or gm.any()):
                continue
            self.present[c] = True
            pb, gb = boundary_band(pm, d), boundary_band(gm, d)
            self.intersection[c] += int(np.count_nonzero(pb & gb))
            self.union[c] += int(np.count_nonzero(pb | gb))
        return self

    def per_class_iou(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = np.where(self.union > 0, self.intersection / np.maximum(self.union, 1), 1.0)
        return np.where(self.present, iou, np.nan)


def boundary_iou(preds, gts, num_classes: int, d: int | None = None) -> IouResult:
    """Boundary IoU with band width ``d`` (default: 2% of the image diagonal, at least 1)."""
    if len(preds) != len(gts):
        raise GridError(f"{len(preds)} predictions for {len(gts)} ground-truth grids")
    acc = BoundaryCounts.empty(num_classes)
    for p, g in zip(preds, gts):
        g = np.asarray(g)
        dd = default_boundary_d(*g.shape[-2:]) if d is None else int(d)
        if dd < 1:
            raise ValueError(f"boundary distance must be >= 1, got {dd}")
        acc.add(p, g, dd)
    per = acc.per_class_iou()
    return IouResult(_mean(per), per)


def _nan_to_none(values: np.ndarray) -> list:
    return [None if math.isnan(v) else float(v) for v in values]


def eval_report(preds, gts, num_classes: int, d: int | None = None, config_hash: str = "") -> dict:
    m = miou(preds, gts, num_classes)
    b = boundary_iou(preds, gts, num_classes, d)
    return {
        "miou": m.mean,
        "biou": b.mean,
        "per_class_iou": _nan_to_none(m.per_class),
        "per_class_biou": _nan_to_none(b.per_class),
        "n_images": len(preds),
        "config_hash": config_hash,
    }
