"""Evaluation metrics: PSNR, confusion matrix, IoU family, joint loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import IGNORE_INDEX


class MetricError(ValueError):
    pass


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 255.0) -> float:
    """10 * log10(max_val^2 / MSE); identical inputs give +inf."""
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(max_val * max_val / mse)


def confusion(pred: np.ndarray, gt: np.ndarray, n_classes: int,
              ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """cm[g][p] = pixels with ground truth g predicted p; ignored gt dropped."""
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {gt.shape}")
    pred = np.asarray(pred).ravel().astype(np.int64)
    gt = np.asarray(gt).ravel().astype(np.int64)
    keep = gt != ignore_index
    pred, gt = pred[keep], gt[keep]
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise MetricError(f"{name} labels fall outside 0..{n_classes - 1}")
    cm = np.bincount(gt * n_classes + pred, minlength=n_classes * n_classes)
    return cm.reshape(n_classes, n_classes)


def per_class_iou(cm: np.ndarray) -> list:
    """IoU per class; None marks classes absent from both pred and gt."""
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm)
    denom = cm.sum(axis=1) + cm.sum(axis=0) - tp
    out = []
    for k in range(cm.shape[0]):
        out.append(None if denom[k] == 0 else float(tp[k]) / float(denom[k]))
    return out


def miou(cm: np.ndarray) -> float:
    """Mean IoU over classes present in prediction or ground truth."""
    ious = [v for v in per_class_iou(cm) if v is not None]
    if not ious:
        raise MetricError("all classes are absent; mIoU is undefined")
    return float(np.mean(ious))


def pixel_accuracy(cm: np.ndarray) -> float:
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise MetricError("empty confusion matrix; accuracy is undefined")
    return float(np.trace(cm)) / total


def joint_loss(pathway_losses) -> float:
    """Weighted sum over (loss, weight) pairs; weights must be >= 0."""
    total = 0.0
    for loss, weight in pathway_losses:
        if weight < 0:
            raise MetricError(f"loss weight must be >= 0, got {weight}")
        total += float(weight) * float(loss)
    return total


@dataclass
class MetricsReport:
    run_id: str
    sigma: float
    connectivity: str
    psnr_db: float | None = None
    miou: float | None = None
    pixel_acc: float | None = None
    per_class_iou: list | None = None

    CSV_HEADER = "run_id,sigma,connectivity,psnr_db,miou,pixel_acc,per_class_iou"

    def csv_row(self) -> str:
        def num(v):
            return "" if v is None else f"{v:.6g}"
        ious = "" if self.per_class_iou is None else ";".join(
            "absent" if v is None else f"{v:.6g}" for v in self.per_class_iou)
        return ",".join([self.run_id, num(self.sigma), self.connectivity,
                         num(self.psnr_db), num(self.miou),
                         num(self.pixel_acc), ious])
