"""Segmentation and temporal-consistency metrics.

IoU metrics follow the usual confusion-matrix definitions. Weighted IoU
weights each class IoU by its share of ground-truth pixels.

Video consistency over an ``n``-frame window counts, among pixels whose
ground-truth label stays constant in the window, those whose prediction is
also constant *and equal to the ground truth*. ``strict=False`` drops the
correctness requirement (prediction merely constant).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

IGNORE_INDEX = 255


@dataclass
class ConfusionMatrix:
    num_classes: int
    ignore_index: int = IGNORE_INDEX
    counts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def update(self, gt: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        gt = np.asarray(gt).reshape(-1)
        pred = np.asarray(pred).reshape(-1)
        if gt.shape != pred.shape:
            raise ValueError(f"gt and prediction differ in size: {gt.size} vs {pred.size}")
        keep = gt != self.ignore_index
        g, p = gt[keep].astype(np.int64), pred[keep].astype(np.int64)
        k = self.num_classes
        if g.size and (g.min() < 0 or g.max() >= k or p.min() < 0 or p.max() >= k):
            raise ValueError(f"labels outside [0, {k})")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different class counts")
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def class_iou(self) -> np.ndarray:
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        denom = tp + fp + fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)


def miou(cm: ConfusionMatrix) -> float:
    """Mean IoU over classes that occur in the ground truth."""
    if cm.total == 0:
        raise ValueError("mIoU of an empty confusion matrix")
    present = cm.counts.sum(axis=1) > 0
    return float(np.mean(cm.class_iou()[present]))


def wiou(cm: ConfusionMatrix) -> float:
    """IoU weighted by ground-truth pixel frequency."""
    if cm.total == 0:
        raise ValueError("weighted IoU of an empty confusion matrix")
    freq = cm.counts.sum(axis=1) / cm.total
    present = freq > 0
    return float(np.sum(freq[present] * cm.class_iou()[present]))


def _constant_mask(frames: np.ndarray) -> np.ndarray:
    return np.all(frames == frames[:1], axis=0)


def vc_n(
    gt_frames: Sequence[np.ndarray],
    pred_frames: Sequence[np.ndarray],
    n: int,
    strict: bool = True,
    ignore_index: int = IGNORE_INDEX,
) -> float:
    gt = np.stack([np.asarray(g) for g in gt_frames])
    pred = np.stack([np.asarray(p) for p in pred_frames])
    if gt.shape != pred.shape:
        raise ValueError(f"gt {gt.shape} and predictions {pred.shape} differ")
    c = gt.shape[0]
    if n < 1 or c < n:
        raise ValueError(f"video of {c} frames is shorter than the window n={n}")
    values = []
    for i in range(c - n + 1):
        g, p = gt[i : i + n], pred[i : i + n]
        d_gt = _constant_mask(g) & np.all(g != ignore_index, axis=0)
        denom = int(d_gt.sum())
        if denom == 0:
            continue
        d_pred = _constant_mask(p)
        if strict:
            d_pred &= p[0] == g[0]
        values.append(int((d_gt & d_pred).sum()) / denom)
    if not values:
        raise ValueError("no window has a temporally consistent ground-truth pixel")
    return float(np.mean(values))


def mvc(per_video: Iterable[float]) -> float:
    vals = list(per_video)
    if not vals:
        raise ValueError("mVC of an empty result set")
    return float(np.mean(vals))


@dataclass
class MetricReport:
    miou: float
    wiou: float
    mvc: float
    window: int
    videos: int

    def rows(self) -> list[tuple[str, float, int, int]]:
        return [
            ("mIoU", self.miou, self.window, self.videos),
            ("WIoU", self.wiou, self.window, self.videos),
            (f"mVC{self.window}", self.mvc, self.window, self.videos),
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value", "n_window", "video_count"])
        for name, value, n, v in self.rows():
            w.writerow([name, f"{value:.6f}", n, v])
        return buf.getvalue()


def evaluate_predictions(
    videos: Sequence[tuple[Sequence[np.ndarray], Sequence[np.ndarray]]],
    num_classes: int,
    window: int,
    strict: bool = True,
    ignore_index: Optional[int] = IGNORE_INDEX,
) -> MetricReport:
    """Score ``(gt_frames, pred_frames)`` pairs, one per video."""
    if not videos:
        raise ValueError("no videos to evaluate")
    cm = ConfusionMatrix(num_classes, ignore_index)
    vcs = []
    for gts, preds in videos:
        for g, p in zip(gts, preds):
            cm.update(g, p)
        vcs.append(vc_n(gts, preds, window, strict, ignore_index))
    return MetricReport(miou(cm), wiou(cm), mvc(vcs), window, len(videos))
