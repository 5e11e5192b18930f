"""Segmentation IoU with a threshold sweep, and center-distance detection AP."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .det import BoxBEV, wrap_angle
from .tensor import Tensor

THRESHOLDS = tuple(round(0.05 * k, 2) for k in range(1, 20))  # 0.05 ... 0.95
DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
YAW_MATCH_DIST = 2.0


@dataclass
class IouResult:
    thresholds: tuple[float, ...]
    per_threshold: np.ndarray  # (T, C)
    iou_max: np.ndarray  # (C,)
    best_threshold: np.ndarray  # (C,)

    @property
    def miou(self) -> float:
        return float(self.iou_max.mean())


class IouAccumulator:
    """Counts intersections and unions over a dataset, per threshold and class.

    A class with an empty union at some threshold (no prediction, no ground truth)
    scores IoU 1 there.
    """

    def __init__(self, num_classes: int, thresholds: Sequence[float] = THRESHOLDS):
        self.thresholds = tuple(thresholds)
        self.inter = np.zeros((len(self.thresholds), num_classes), dtype=np.int64)
        self.union = np.zeros_like(self.inter)

    def update(self, probs, gt) -> None:
        p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
        g = np.asarray(gt)
        if p.shape != g.shape:
            raise ValueError(f"probs {p.shape} and gt {g.shape} differ")
        if not np.all((g == 0) | (g == 1)):
            raise ValueError("gt must be binary")
        g = g.astype(bool)
        axes = tuple(ax for ax in range(p.ndim) if ax != 1)
        for k, t in enumerate(self.thresholds):
            pred = p >= t
            self.inter[k] += (pred & g).sum(axis=axes)
            self.union[k] += (pred | g).sum(axis=axes)

    def result(self) -> IouResult:
        with np.errstate(invalid="ignore", divide="ignore"):
            table = np.where(self.union > 0, self.inter / np.maximum(self.union, 1), 1.0)
        best = table.argmax(axis=0)
        cols = np.arange(table.shape[1])
        return IouResult(self.thresholds, table, table[best, cols], np.asarray(self.thresholds)[best])


def iou_per_class(probs, gt, thresholds: Sequence[float] = THRESHOLDS) -> IouResult:
    """Per-class IoU at every threshold of ``probs`` (B, C, H, W) against binary ``gt``."""
    acc = IouAccumulator(np.shape(gt)[1], thresholds)
    acc.update(probs, gt)
    return acc.result()


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------

def _per_sample(boxes) -> list[list[BoxBEV]]:
    boxes = list(boxes)
    if boxes and isinstance(boxes[0], BoxBEV):
        return [boxes]
    return [list(b) for b in boxes]


@dataclass(frozen=True)
class Match:
    sample: int
    pred: BoxBEV
    gt: BoxBEV | None  # None marks a false positive


def greedy_match(preds: Sequence[Sequence[BoxBEV]], gts: Sequence[Sequence[BoxBEV]], max_dist: float,
                 class_id: int | None = None) -> list[Match]:
    """Score-ordered matching: each prediction takes the nearest free ground truth closer than ``max_dist``."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction samples vs {len(gts)} ground-truth samples")
    flat = [(s, b) for s, sample in enumerate(preds) for b in sample if class_id is None or b.class_id == class_id]
    flat.sort(key=lambda sb: -sb[1].score)  # stable, so ties keep input order
    taken = [[False] * len(g) for g in gts]
    out = []
    for s, b in flat:
        best, best_d = -1, max_dist
        for j, g in enumerate(gts[s]):
            if taken[s][j] or (class_id is not None and g.class_id != class_id):
                continue
            dist = math.hypot(b.x - g.x, b.y - g.y)
            if dist < best_d:
                best, best_d = j, dist
        if best >= 0:
            taken[s][best] = True
            out.append(Match(s, b, gts[s][best]))
        else:
            out.append(Match(s, b, None))
    return out


def average_precision(is_tp: Sequence[bool], num_gt: int) -> float:
    """Area under the all-point interpolated precision-recall curve; NaN when there is no ground truth."""
    if num_gt == 0:
        return float("nan")
    if len(is_tp) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(is_tp, dtype=float))
    fp = np.cumsum(1.0 - np.asarray(is_tp, dtype=float))
    recall = tp / num_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float((steps * envelope).sum())


@dataclass
class DetectionResult:
    ap: dict[float, float]
    yaw_error: float
    num_gt: int

    @property
    def mean_ap(self) -> float:
        vals = [v for v in self.ap.values() if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")


def detection_metrics(preds, gts, dist_thresholds: Sequence[float] = DIST_THRESHOLDS) -> DetectionResult:
    preds, gts = _per_sample(preds), _per_sample(gts)
    num_gt = sum(len(g) for g in gts)
    ap = {}
    yaw_error = float("nan")
    for d in dist_thresholds:
        matches = greedy_match(preds, gts, d)
        ap[d] = average_precision([m.gt is not None for m in matches], num_gt)
        if d == YAW_MATCH_DIST:
            errs = [abs(wrap_angle(m.pred.yaw - m.gt.yaw)) for m in matches if m.gt is not None]
            yaw_error = float(np.mean(errs)) if errs else float("nan")
    if YAW_MATCH_DIST not in dist_thresholds:
        errs = [abs(wrap_angle(m.pred.yaw - m.gt.yaw)) for m in greedy_match(preds, gts, YAW_MATCH_DIST)
                if m.gt is not None]
        yaw_error = float(np.mean(errs)) if errs else float("nan")
    return DetectionResult(ap, yaw_error, num_gt)


def unrecovered(preds, gts, max_dist: float) -> list[tuple[int, BoxBEV]]:
    """Ground-truth boxes with no matched prediction within ``max_dist``."""
    preds, gts = _per_sample(preds), _per_sample(gts)
    hit = {(m.sample, id(m.gt)) for m in greedy_match(preds, gts, max_dist) if m.gt is not None}
    return [(s, g) for s, sample in enumerate(gts) for g in sample if (s, id(g)) not in hit]


# ---------------------------------------------------------------------------
# comparison table: one row per arm, plus the difference row
# ---------------------------------------------------------------------------

DELTA_ROW = "delta (ctab - baseline)"


def table_columns(class_names: Sequence[str]) -> list[str]:
    return ["arm", *class_names, "mIoU", "mAP", "yaw_err"]


def write_comparison_csv(path, rows: Mapping[str, Mapping[str, float]], class_names: Sequence[str]) -> None:
    """``rows`` maps arm name to column values; the difference row is computed here."""
    cols = table_columns(class_names)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for arm in ("baseline", "ctab"):
            w.writerow([arm, *(f"{rows[arm][c]:.6f}" for c in cols[1:])])
        w.writerow([DELTA_ROW, *(f"{rows['ctab'][c] - rows['baseline'][c]:.6f}" for c in cols[1:])])


def read_comparison_csv(path) -> dict[str, dict[str, float]]:
    with open(path, newline="") as fh:
        return {r["arm"]: {k: float(v) for k, v in r.items() if k != "arm"} for r in csv.DictReader(fh)}
