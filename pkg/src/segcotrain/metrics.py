"""Confusion-matrix based IoU / mIoU evaluation.

Pixels with void ground truth are ignored. A void *prediction* on a non-void
ground-truth pixel is a miss: it counts as FN for the gt class (tracked in a
dedicated column) and as FP for no class. Classes with an all-zero
denominator are "absent" and excluded from averaging, mirroring the '-'
convention of segmentation result tables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from segcotrain.core import LabelMap, LabelSpace


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[gt, pred] over real classes, plus a void-prediction column per gt class."""

    counts: np.ndarray  # (N_c, N_c) int64
    void_pred: np.ndarray  # (N_c,) int64, prediction == void for each gt class
    ignored_pixels: int

    @staticmethod
    def empty(num_classes: int) -> "ConfusionMatrix":
        return ConfusionMatrix(
            counts=np.zeros((num_classes, num_classes), dtype=np.int64),
            void_pred=np.zeros(num_classes, dtype=np.int64),
            ignored_pixels=0,
        )

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Elementwise addition, so partial matrices can accumulate in parallel."""
        return ConfusionMatrix(
            counts=self.counts + other.counts,
            void_pred=self.void_pred + other.void_pred,
            ignored_pixels=self.ignored_pixels + other.ignored_pixels,
        )

    def total_pixels(self) -> int:
        return int(self.counts.sum()) + int(self.void_pred.sum()) + self.ignored_pixels


def confusion_accumulate(
    pred: LabelMap, gt: LabelMap, space: LabelSpace, acc: ConfusionMatrix | None = None
) -> ConfusionMatrix:
    """Tally one pred/gt pair into a (new) confusion matrix."""
    if pred.values.shape != gt.values.shape:
        raise ValueError(
            f"prediction shape {pred.values.shape} != ground truth shape {gt.values.shape}"
        )
    nc = space.num_classes
    if acc is None:
        acc = ConfusionMatrix.empty(nc)

    g = gt.values.ravel().astype(np.int64)
    p = pred.values.ravel().astype(np.int64)
    gt_void = g == space.void_id
    ignored = int(gt_void.sum())

    g, p = g[~gt_void], p[~gt_void]
    pred_void = p == space.void_id
    void_pred = np.bincount(g[pred_void], minlength=nc)
    g, p = g[~pred_void], p[~pred_void]
    counts = np.bincount(g * nc + p, minlength=nc * nc).reshape(nc, nc)

    return acc.merge(ConfusionMatrix(counts=counts, void_pred=void_pred, ignored_pixels=ignored))


@dataclass(frozen=True)
class IoUResult:
    """Per-class IoU with absent classes (zero denominator) flagged, never NaN."""

    values: np.ndarray  # (N_c,) float64, 0.0 where absent
    present: np.ndarray  # (N_c,) bool


def iou_per_class(cm: ConfusionMatrix) -> IoUResult:
    """IoU_c = TP / (TP + FP + FN), with void predictions folded into FN."""
    tp = np.diag(cm.counts).astype(np.float64)
    fn = cm.counts.sum(axis=1) - np.diag(cm.counts) + cm.void_pred
    fp = cm.counts.sum(axis=0) - np.diag(cm.counts)
    denom = tp + fp + fn
    present = denom > 0
    values = np.zeros(cm.num_classes, dtype=np.float64)
    values[present] = tp[present] / denom[present]
    return IoUResult(values=values, present=present)


def miou(ious: IoUResult, subset: list[int] | tuple[int, ...] | None = None) -> float:
    """Arithmetic mean of per-class IoU over subset (or all present classes)."""
    nc = ious.values.shape[0]
    if subset is None:
        effective = np.nonzero(ious.present)[0]
    else:
        bad = [c for c in subset if not 0 <= c < nc]
        if bad:
            raise ValueError(f"subset ids out of range: {bad}")
        effective = np.array([c for c in subset if ious.present[c]], dtype=np.int64)
    if effective.size == 0:
        raise ValueError("no classes left to average (all absent)")
    return float(ious.values[effective].mean())
