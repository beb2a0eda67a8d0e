"""Segmentation metrics: confusion-matrix mIoU and the hallucination (false-positive) rate."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np


logger = logging.getLogger(__name__)


@dataclass
class IoUResult:
    """Mean IoU with the per-class vector (NaN marks classes absent from pred and gt)."""
    miou: float
    per_class: np.ndarray

    def to_record(self) -> Dict[str, object]:
        return {
            "miou": self.miou,
            "per_class_iou": [None if np.isnan(v) else float(v) for v in self.per_class],
        }


def _valid(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if mask is None:
        return np.ones(gt.shape, dtype=bool)
    mask = np.asarray(mask)
    if mask.shape != gt.shape:
        raise ValueError(f"mask {mask.shape} does not match labels {gt.shape}")
    return mask.astype(bool)


def confusion_matrix(
    pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray], num_classes: int
) -> np.ndarray:
    """N×N counts; row = ground truth, column = prediction, valid pixels only."""
    valid = _valid(pred, gt, mask)
    p = np.asarray(pred)[valid].astype(np.int64)
    g = np.asarray(gt)[valid].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= num_classes or g.min() < 0 or g.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    counts = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def iou_from_confusion(confusion: np.ndarray) -> IoUResult:
    tp = np.diag(confusion).astype(np.float64)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - tp
    per_class = np.full(confusion.shape[0], np.nan)
    seen = union > 0
    per_class[seen] = tp[seen] / union[seen]
    if not seen.any():
        logger.warning("miou: no valid pixels, mean IoU undefined")
        return IoUResult(miou=float("nan"), per_class=per_class)
    return IoUResult(miou=float(np.mean(per_class[seen])), per_class=per_class)


def miou(
    pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray], num_classes: int
) -> IoUResult:
    """Mean IoU over classes present in prediction or ground truth (valid pixels only)."""
    return iou_from_confusion(confusion_matrix(pred, gt, mask, num_classes))


def false_positive_rate(
    pred: np.ndarray,
    gt: np.ndarray,
    mask: Optional[np.ndarray] = None,
    present: Optional[Sequence[int]] = None,
) -> float:
    """Fraction of valid pixels predicted as a category absent from the image.

    Args:
        present: Categories that occur in the image (default: labels found in gt)
    """
    valid = _valid(pred, gt, mask)
    if not valid.any():
        return 0.0
    if present is None:
        present = np.unique(np.asarray(gt)[valid])
    hallucinated = ~np.isin(np.asarray(pred), present) & valid
    return float(hallucinated.sum() / valid.sum())


@dataclass
class MetricAccumulator:
    """Dataset-level confusion plus per-image records, reduced in insertion order."""
    num_classes: int
    confusion: np.ndarray = field(init=False)
    records: List[Dict[str, object]] = field(default_factory=list)
    _fp_pixels: float = 0.0
    _valid_pixels: float = 0.0

    def __post_init__(self) -> None:
        self.confusion = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def add(
        self,
        pred: np.ndarray,
        gt: np.ndarray,
        mask: Optional[np.ndarray] = None,
        name: Optional[str] = None,
        present: Optional[Sequence[int]] = None,
    ) -> IoUResult:
        confusion = confusion_matrix(pred, gt, mask, self.num_classes)
        self.confusion += confusion
        result = iou_from_confusion(confusion)
        fp = false_positive_rate(pred, gt, mask, present)
        valid = float(_valid(pred, gt, mask).sum())
        self._fp_pixels += fp * valid
        self._valid_pixels += valid
        record = {
            "image": name if name is not None else len(self.records),
            **result.to_record(),
            "false_positive_rate": fp,
        }
        self.records.append(record)
        return result

    @property
    def result(self) -> IoUResult:
        return iou_from_confusion(self.confusion)

    @property
    def false_positive_rate(self) -> float:
        return self._fp_pixels / self._valid_pixels if self._valid_pixels else 0.0
