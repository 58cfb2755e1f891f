"""
Confusion-matrix segmentation metrics (MIoU, MPA) and frame-rate helpers.

Rows are ground truth, columns are predictions.
"""
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from src.errors import (
    EmptyConfusionMatrixError,
    LabelOutOfRangeError,
    ShapeMismatchError,
    UndefinedMetricError,
    ZeroDurationError,
)


@dataclass(frozen=True)
class MpaResult:
    """Both readings of pixel accuracy: mean of per-class accuracies and global accuracy."""

    class_mean: float
    global_accuracy: float


class ConfusionMatrix:
    def __init__(self, num_classes: int = 2, counts: Optional[np.ndarray] = None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes) or (counts < 0).any():
            raise ValueError(f"counts must be a non-negative {num_classes}x{num_classes} matrix")
        self.counts = counts.copy()

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        """
        Add one pair of label masks.

        Raises:
            ShapeMismatchError: masks differ in shape.
            LabelOutOfRangeError: a label is outside ``[0, num_classes)``.
        """
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeMismatchError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        if pred.size == 0:
            return self
        k = self.num_classes
        for name, labels in (("prediction", pred), ("ground truth", gt)):
            if labels.min() < 0 or labels.max() >= k:
                raise LabelOutOfRangeError(f"{name} labels must lie in [0, {k})")
        index = k * gt.astype(np.int64).ravel() + pred.astype(np.int64).ravel()
        self.counts += np.bincount(index, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def iou_per_class(self) -> np.ndarray:
        """IoU per class; NaN where the class has an empty union."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)

    def miou(self) -> float:
        """
        Mean IoU over classes with a non-empty union.

        Raises:
            UndefinedMetricError: every union is empty.
        """
        iou = self.iou_per_class()
        if np.isnan(iou).all():
            raise UndefinedMetricError("MIoU is undefined: every class has an empty union")
        return float(np.nanmean(iou))

    def mpa(self) -> MpaResult:
        """
        Raises:
            EmptyConfusionMatrixError: no pixels were observed.
        """
        total = self.total
        if total == 0:
            raise EmptyConfusionMatrixError("no pixels observed")
        tp = np.diag(self.counts).astype(np.float64)
        rows = self.counts.sum(axis=1)
        per_class = tp[rows > 0] / rows[rows > 0]
        return MpaResult(float(per_class.mean()), float(tp.sum() / total))

    def __repr__(self) -> str:
        return f"ConfusionMatrix({self.counts.tolist()})"


def confusion_of(pairs: Iterable, num_classes: int = 2) -> ConfusionMatrix:
    cm = ConfusionMatrix(num_classes)
    for pred, gt in pairs:
        cm.update(pred, gt)
    return cm


def argmax_mask(logits: np.ndarray) -> np.ndarray:
    """Class index per pixel of ``n x K x H x W`` logits; ties go to the lowest class (background)."""
    return np.argmax(np.asarray(logits), axis=1).astype(np.uint8)


def fps(total_images: int, wall_seconds: float) -> float:
    """
    Raises:
        ZeroDurationError: ``wall_seconds`` is not positive while images were processed.
    """
    if total_images == 0:
        return 0.0
    if wall_seconds <= 0:
        raise ZeroDurationError(f"wall time must be positive, got {wall_seconds}")
    return total_images / wall_seconds


def ms_per_image(frames_per_second: float) -> float:
    if frames_per_second <= 0:
        raise ZeroDurationError("frame rate must be positive")
    return 1000.0 / frames_per_second
