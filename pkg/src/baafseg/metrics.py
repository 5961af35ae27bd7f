"""Confusion-matrix based segmentation scores (OA, mAcc, IoU, mIoU)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, labels, predictions) -> "ConfusionMatrix":
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
        if labels.shape != predictions.shape:
            raise MetricError(f"{len(labels)} labels vs {len(predictions)} predictions")
        q = self.num_classes
        for name, arr in (("label", labels), ("prediction", predictions)):
            if arr.size and (arr.min() < 0 or arr.max() >= q):
                raise MetricError(f"{name} id outside [0, {q})")
        self.counts += np.bincount(labels * q + predictions, minlength=q * q).reshape(q, q)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise MetricError("cannot merge matrices of different size")
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def scores(self) -> "Scores":
        return scores(self)


@dataclass
class Scores:
    oa: float
    macc: float
    miou: float
    iou: np.ndarray  # NaN for classes absent from both truth and prediction
    class_acc: np.ndarray

    def as_dict(self) -> dict[str, float]:
        out = {"oa": self.oa, "macc": self.macc, "miou": self.miou}
        for c, v in enumerate(self.iou):
            out[f"iou_{c}"] = float(v)
        return out


def scores(cm: ConfusionMatrix) -> Scores:
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise MetricError("confusion matrix is empty")
    tp = np.diag(counts)
    truth = counts.sum(axis=1)
    pred = counts.sum(axis=0)
    union = truth + pred - tp
    present = union > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(present, tp / union, np.nan)
        acc = np.where(truth > 0, tp / truth, np.nan)
    # accuracy is undefined for classes with no ground-truth points; those drop out of mAcc
    return Scores(float(tp.sum() / total), float(np.nanmean(acc)), float(np.nanmean(iou)), iou, acc)


def evaluate(labels, predictions, num_classes: int) -> Scores:
    return ConfusionMatrix(num_classes).accumulate(labels, predictions).scores()
