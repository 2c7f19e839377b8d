"""Confusion-matrix segmentation scoring (micro IoU over a whole stream)."""
from __future__ import annotations

import numpy as np


class ConfusionMatrix:
    """K x K pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, gt_mask, pred_mask) -> "ConfusionMatrix":
        gt = np.asarray(gt_mask)
        pred = np.asarray(pred_mask)
        if gt.shape != pred.shape:
            raise ValueError(f"mask shape mismatch: gt {gt.shape} vs pred {pred.shape}")
        k = self.num_classes
        for name, m in (("gt", gt), ("pred", pred)):
            if m.size and (m.min() < 0 or m.max() >= k):
                raise ValueError(f"{name} label out of range [0, {k}): min {m.min()}, max {m.max()}")
        idx = gt.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=k * k).reshape(k, k)
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> tuple[list, float]:
        """Per-class IoU (None where TP+FP+FN is zero) and their mean."""
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        denom = tp + fp + fn
        per_class = [float(t / d) if d > 0 else None for t, d in zip(tp, denom)]
        scored = [v for v in per_class if v is not None]
        miou = float(np.mean(scored)) if scored else 0.0
        return per_class, miou

    def pixel_accuracy(self) -> float:
        return float(np.trace(self.counts) / max(self.total, 1))

    def copy(self) -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts.copy()
        return out


def iou(cm: ConfusionMatrix) -> tuple[list, float]:
    return cm.iou()
