"""Pixel-level road metrics: MaxF, average precision, recall, FPR, FNR, accuracy."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .raster import ConfidenceMap, LabelMask

__all__ = ["MetricsReport", "SWEEP_THRESHOLDS", "confusion_sweep", "evaluate", "binarize"]

# compared in float32 so maps read back from 8-bit files land exactly on a level
SWEEP_THRESHOLDS = (np.arange(256, dtype=np.float64) / 255.0).astype(np.float32)


@dataclass
class MetricsReport:
    accuracy: float
    max_f: float
    average_precision: float
    recall_at_maxf: float
    precision_at_maxf: float
    fpr_at_maxf: float
    fnr_at_maxf: float
    threshold_at_maxf: float
    curve: list[tuple[float, float, float]] = field(default_factory=list, repr=False)

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("accuracy", self.accuracy),
            ("max_f", self.max_f),
            ("average_precision", self.average_precision),
            ("recall_at_maxf", self.recall_at_maxf),
            ("precision_at_maxf", self.precision_at_maxf),
            ("fpr_at_maxf", self.fpr_at_maxf),
            ("fnr_at_maxf", self.fnr_at_maxf),
            ("threshold_at_maxf", self.threshold_at_maxf),
        ]

    def write_csv(self, metrics_path: str | os.PathLike, curve_path: str | os.PathLike) -> None:
        with open(metrics_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            for name, value in self.rows():
                w.writerow([name, repr(float(value))])
        with open(curve_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "precision", "recall"])
            for t, p, r in self.curve:
                w.writerow([repr(float(t)), repr(float(p)), repr(float(r))])


def binarize(cmap: ConfidenceMap, threshold: float) -> LabelMask:
    """Road wherever confidence >= threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    return LabelMask((cmap.data >= np.float32(threshold)).astype(np.uint8))


def confusion_sweep(preds, gts) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """TP, FP, TN, FN for every sweep threshold, pooled over all images."""
    if len(preds) == 0 or len(preds) != len(gts):
        raise ValueError("need aligned, non-empty lists of predictions and masks")
    pos_hist = np.zeros(256, dtype=np.int64)
    neg_hist = np.zeros(256, dtype=np.int64)
    for p, g in zip(preds, gts):
        if (p.height, p.width) != (g.height, g.width):
            raise ValueError("dimension mismatch between prediction and mask")
        # level = index of the highest threshold not exceeding the value
        level = np.searchsorted(SWEEP_THRESHOLDS, p.data.ravel(), side="right") - 1
        road = g.data.ravel().astype(bool)
        pos_hist += np.bincount(level[road], minlength=256)
        neg_hist += np.bincount(level[~road], minlength=256)
    # counts with level >= i, i.e. value >= threshold i
    tp = np.cumsum(pos_hist[::-1])[::-1]
    fp = np.cumsum(neg_hist[::-1])[::-1]
    fn = pos_hist.sum() - tp
    tn = neg_hist.sum() - fp
    return tp, fp, tn, fn


def _ratio(num, den, empty: float) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.full(num.shape, empty)
    np.divide(num, den, out=out, where=den > 0)
    return out


def evaluate(preds: list[ConfidenceMap], gts: list[LabelMask]) -> MetricsReport:
    """Sweep thresholds i/255 and report metrics at the MaxF operating point.

    Precision with no predicted positives is taken as 1, recall with no road
    pixels as 0. Accuracy is measured at threshold 0.5. All values except the
    threshold are percentages.
    """
    tp, fp, tn, fn = confusion_sweep(preds, gts)
    precision = _ratio(tp, tp + fp, 1.0)
    recall = _ratio(tp, tp + fn, 0.0)
    f = _ratio(2 * precision * recall, precision + recall, 0.0)
    best = int(np.argmax(f))
    # recall grows as the threshold falls; anchor the curve at recall 0
    r = np.concatenate([[0.0], recall[::-1]])
    p = np.concatenate([[precision[-1]], precision[::-1]])
    ap = float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2.0))
    correct = total = 0
    for pm, g in zip(preds, gts):
        hit = (pm.data >= np.float32(0.5)) == g.data.astype(bool)
        correct += int(hit.sum())
        total += hit.size
    return MetricsReport(
        accuracy=100.0 * correct / total,
        max_f=100.0 * float(f[best]),
        average_precision=100.0 * ap,
        recall_at_maxf=100.0 * float(recall[best]),
        precision_at_maxf=100.0 * float(precision[best]),
        fpr_at_maxf=100.0 * float(_ratio(fp[best], fp[best] + tn[best], 0.0)),
        fnr_at_maxf=100.0 * float(_ratio(fn[best], fn[best] + tp[best], 0.0)),
        threshold_at_maxf=float(SWEEP_THRESHOLDS[best]),
        curve=[
            (float(SWEEP_THRESHOLDS[i]), float(precision[i]), float(recall[i])) for i in range(256)
        ],
    )
