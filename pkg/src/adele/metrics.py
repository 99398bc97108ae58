"""IoU-family metrics, including the early-learning / memorization diagnostics.

``iou_el`` and ``iou_m`` restrict the comparison to pixels whose noisy label
disagrees with the ground truth: the first compares predictions with the
ground truth there, the second with the (wrong) noisy labels.

Undefined IoUs (empty union) are returned as ``None`` and excluded from means.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np


class UndefinedMetricError(ValueError):
    pass


def _check_same_shape(*masks):
    ref = np.shape(masks[0])
    for m in masks[1:]:
        if np.shape(m) != ref:
            raise ValueError(f"mask shapes differ: {ref} vs {np.shape(m)}")


def iou_counts(pred, ref, c: int, region=None) -> tuple[int, int]:
    """Integer (intersection, union) pixel counts for class ``c``."""
    pred, ref = np.asarray(pred), np.asarray(ref)
    _check_same_shape(pred, ref)
    a, b = pred == c, ref == c
    if region is not None:
        region = np.asarray(region, dtype=bool)
        _check_same_shape(pred, region)
        a, b = a & region, b & region
    return int(np.count_nonzero(a & b)), int(np.count_nonzero(a | b))


def _ratio(inter: int, union: int) -> Optional[float]:
    return inter / union if union else None


def iou(pred, ref, c: int, region=None) -> Optional[float]:
    return _ratio(*iou_counts(pred, ref, c, region))


@dataclass
class IoUReport:
    per_class_iou: list            # float or None per class
    intersection: list
    union: list
    miou: float

    @property
    def skipped(self) -> list:
        return [c for c, v in enumerate(self.per_class_iou) if v is None]


def confusion_matrix(pred, ref, num_classes: int) -> np.ndarray:
    """``cm[i, j]`` counts pixels with reference ``i`` and prediction ``j``."""
    pred, ref = np.asarray(pred).ravel(), np.asarray(ref).ravel()
    if pred.shape != ref.shape:
        raise ValueError("mask shapes differ")
    return np.bincount(ref.astype(np.int64) * num_classes + pred, minlength=num_classes ** 2
                       ).reshape(num_classes, num_classes)


def report_from_confusion(cm: np.ndarray, classes: Optional[Iterable[int]] = None) -> IoUReport:
    cm = np.asarray(cm, dtype=np.int64)
    classes = range(cm.shape[0]) if classes is None else list(classes)
    inter = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - inter
    per_class, I, U = [], [], []
    for c in classes:
        I.append(int(inter[c]))
        U.append(int(union[c]))
        per_class.append(_ratio(I[-1], U[-1]))
    defined = [v for v in per_class if v is not None]
    if not defined:
        raise UndefinedMetricError("every class has an empty union")
    return IoUReport(per_class, I, U, float(np.mean(defined)))


def miou(pred, ref, classes: Sequence[int] | int) -> IoUReport:
    """Mean IoU over ``classes`` (an int means ``range(classes)``).

    ``pred`` and ``ref`` may also be stacks of masks; counts are pooled.
    """
    _check_same_shape(pred, ref)
    if isinstance(classes, int):
        classes = range(classes)
    classes = list(classes)
    k = max(classes + [int(np.max(pred)), int(np.max(ref))]) + 1
    return report_from_confusion(confusion_matrix(pred, ref, k), classes)


def wrong_region(gt, noisy) -> np.ndarray:
    return np.asarray(gt) != np.asarray(noisy)


def iou_el(pred, gt, noisy, c: int) -> Optional[float]:
    _check_same_shape(pred, gt, noisy)
    return iou(pred, gt, c, wrong_region(gt, noisy))


def iou_m(pred, gt, noisy, c: int) -> Optional[float]:
    _check_same_shape(pred, gt, noisy)
    return iou(pred, noisy, c, wrong_region(gt, noisy))


@dataclass
class ClassIoUSeries:
    """Training IoU of one class against the original noisy annotations."""

    class_id: int
    epochs: list = field(default_factory=list)
    values: list = field(default_factory=list)   # float or None

    def defined(self) -> tuple[np.ndarray, np.ndarray]:
        pts = [(t, v) for t, v in zip(self.epochs, self.values) if v is not None]
        if not pts:
            return np.empty(0), np.empty(0)
        t, v = zip(*pts)
        return np.asarray(t, dtype=np.float64), np.asarray(v, dtype=np.float64)

    def up_to(self, epoch: int) -> "ClassIoUSeries":
        keep = [i for i, t in enumerate(self.epochs) if t <= epoch]
        return ClassIoUSeries(self.class_id, [self.epochs[i] for i in keep],
                              [self.values[i] for i in keep])

    def __len__(self):
        return len(self.epochs)


def append_training_iou(series: ClassIoUSeries, epoch: int, preds, noisy) -> ClassIoUSeries:
    """Append the dataset-pooled class IoU (one ratio over all examples)."""
    if series.epochs and epoch <= series.epochs[-1]:
        raise ValueError(f"epoch {epoch} does not follow {series.epochs[-1]}")
    if epoch < 1:
        raise ValueError("training epochs are numbered from 1")
    inter = union = 0
    for p, y in zip(preds, noisy):
        i, u = iou_counts(p, y, series.class_id)
        inter += i
        union += u
    series.epochs.append(epoch)
    series.values.append(_ratio(inter, union))
    return series


def pooled_region_iou(preds, refs, gts, noisies, c) -> Optional[float]:
    """Dataset-pooled IoU of ``preds`` vs ``refs`` on the wrongly labelled pixels.

    ``c`` is one class id or a collection of ids whose counts are pooled too.
    """
    classes = [c] if np.isscalar(c) else list(c)
    inter = union = 0
    for p, r, g, n in zip(preds, refs, gts, noisies):
        region = wrong_region(g, n)
        for k in classes:
            i, u = iou_counts(p, r, k, region)
            inter += i
            union += u
    return _ratio(inter, union)
