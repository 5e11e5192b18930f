"""Center-based detection head, Gaussian target encoding and peak decoding."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence, TextIO

import numpy as np
from scipy.ndimage import maximum_filter

from .layers import Conv2d, ConvNormAct, Module
from .seg import HEAD_PRIOR_BIAS
from .tensor import Parameter, Tensor, get_dtype

REG_CHANNELS = 6  # dx, dy, log w, log l, sin yaw, cos yaw
MIN_OVERLAP = 0.7
MIN_RADIUS = 2


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    theta = np.asarray(theta, dtype=np.float64)
    # in-range values pass through untouched so identity transforms stay exact
    inside = (theta > -np.pi) & (theta <= np.pi)
    wrapped = np.where(inside, theta, np.pi - np.mod(np.pi - theta, 2 * np.pi))
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


@dataclass(frozen=True)
class BoxBEV:
    x: float
    y: float
    w: float
    l: float
    yaw: float
    class_id: int = 0
    score: float = 1.0

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0):
            raise ValueError(f"box sizes must be positive, got w={self.w}, l={self.l}")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @property
    def center(self) -> tuple[float, float]:
        return self.x, self.y

    def corners(self) -> np.ndarray:
        """(4, 2) corners, counter-clockwise; length runs along the heading."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        half = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]]) * [self.l / 2, self.w / 2]
        rot = np.array([[c, -s], [s, c]])
        return half @ rot.T + [self.x, self.y]

    def contains(self, px, py) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx, dy = np.asarray(px) - self.x, np.asarray(py) - self.y
        along = dx * c + dy * s
        across = -dx * s + dy * c
        return (np.abs(along) <= self.l / 2) & (np.abs(across) <= self.w / 2)

    def with_score(self, score: float) -> "BoxBEV":
        return replace(self, score=score)


@dataclass(frozen=True)
class GridMeta:
    """Cell (row i, col j) spans x in origin_x + [j, j+1)*cell, y in origin_y + [i, i+1)*cell."""

    height: int
    width: int
    cell_size: float
    origin_x: float
    origin_y: float

    @classmethod
    def centered(cls, cells: int, cell_size: float) -> "GridMeta":
        half = cells * cell_size / 2
        return cls(cells, cells, cell_size, -half, -half)

    def cell_coords(self, x, y):
        return (np.asarray(x) - self.origin_x) / self.cell_size, (np.asarray(y) - self.origin_y) / self.cell_size

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """World (x, y) of every cell center, each shaped (H, W)."""
        xs = self.origin_x + (np.arange(self.width) + 0.5) * self.cell_size
        ys = self.origin_y + (np.arange(self.height) + 0.5) * self.cell_size
        return np.meshgrid(xs, ys, indexing="xy")


class DetHead(Module):
    def __init__(self, in_channels: int, num_classes: int, rng: np.random.Generator, hidden: int = 64):
        self.shared = ConvNormAct(in_channels, hidden, 3, rng, norm="group")
        self.heatmap_head = Conv2d(hidden, num_classes, 1, rng)
        self.heatmap_head.bias = Parameter(np.full(num_classes, HEAD_PRIOR_BIAS, dtype=get_dtype()), decay=False)
        self.reg_head = Conv2d(hidden, REG_CHANNELS, 1, rng)

    def forward(self, f: Tensor) -> tuple[Tensor, Tensor]:
        if f.shape[1] != self.shared.conv.in_channels:
            raise ValueError(f"det head expects {self.shared.conv.in_channels} channels, got {f.shape[1]}")
        x = self.shared(f)
        return self.heatmap_head(x), self.reg_head(x)


def gaussian_radius(length: float, width: float, min_overlap: float = MIN_OVERLAP) -> float:
    """Largest center shift keeping IoU >= min_overlap with a box of the given size (in cells)."""
    a1, b1 = 1.0, length + width
    c1 = width * length * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 - math.sqrt(b1 ** 2 - 4 * a1 * c1)) / (2 * a1)
    a2, b2 = 4.0, 2 * (length + width)
    c2 = (1 - min_overlap) * width * length
    r2 = (b2 - math.sqrt(b2 ** 2 - 4 * a2 * c2)) / (2 * a2)
    a3, b3 = 4 * min_overlap, -2 * min_overlap * (length + width)
    c3 = (min_overlap - 1) * width * length
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / (2 * a3)
    return min(r1, r2, r3)


def draw_gaussian(heatmap: np.ndarray, row: int, col: int, radius: int) -> None:
    """Max-splat a Gaussian with peak exactly 1 at (row, col), in place."""
    sigma = (2 * radius + 1) / 6
    offs = np.arange(-radius, radius + 1)
    g = np.exp(-(offs[:, None] ** 2 + offs[None, :] ** 2) / (2 * sigma * sigma))
    H, W = heatmap.shape
    top, bottom = min(row, radius), min(H - row, radius + 1)
    left, right = min(col, radius), min(W - col, radius + 1)
    window = heatmap[row - top:row + bottom, col - left:col + right]
    patch = g[radius - top:radius + bottom, radius - left:radius + right]
    np.maximum(window, patch, out=window)


def encode_targets(boxes: Iterable[BoxBEV], grid: GridMeta, num_classes: int = 1):
    """Dense targets for one sample: heatmap (C,H,W), regression (6,H,W), mask (H,W)."""
    heatmap = np.zeros((num_classes, grid.height, grid.width))
    reg = np.zeros((REG_CHANNELS, grid.height, grid.width))
    mask = np.zeros((grid.height, grid.width))
    for box in boxes:
        cx, cy = grid.cell_coords(box.x, box.y)
        col, row = int(math.floor(cx)), int(math.floor(cy))
        if not (0 <= col < grid.width and 0 <= row < grid.height) or box.class_id >= num_classes:
            continue
        radius = max(MIN_RADIUS, int(gaussian_radius(box.l / grid.cell_size, box.w / grid.cell_size)))
        draw_gaussian(heatmap[box.class_id], row, col, radius)
        reg[:, row, col] = (cx - col, cy - row, math.log(box.w), math.log(box.l),
                            math.sin(box.yaw), math.cos(box.yaw))
        mask[row, col] = 1.0
    return heatmap, reg, mask


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1 + np.tanh(0.5 * x))


def decode_boxes(heatmap_logits, reg, score_thresh: float, max_dets: int, grid: GridMeta) -> list[BoxBEV]:
    """Peaks of one sample's heatmap (C,H,W) turned into boxes, best first."""
    logits = heatmap_logits.data if isinstance(heatmap_logits, Tensor) else np.asarray(heatmap_logits)
    reg = reg.data if isinstance(reg, Tensor) else np.asarray(reg)
    scores = _sigmoid(logits.astype(np.float64))
    pooled = maximum_filter(scores, size=(1, 3, 3), mode="constant", cval=-np.inf)
    peaks = (scores == pooled) & (scores > score_thresh)
    cls, rows, cols = np.nonzero(peaks)
    order = np.argsort(-scores[cls, rows, cols], kind="stable")[:max_dets]
    boxes = []
    for k in order:
        c, i, j = cls[k], rows[k], cols[k]
        dx, dy, log_w, log_l, s, co = (float(v) for v in reg[:, i, j])
        boxes.append(BoxBEV(
            x=(j + dx) * grid.cell_size + grid.origin_x,
            y=(i + dy) * grid.cell_size + grid.origin_y,
            w=math.exp(log_w),
            l=math.exp(log_l),
            yaw=math.atan2(s, co),
            class_id=int(c),
            score=float(scores[c, i, j]),
        ))
    return boxes


BOX_CSV_HEADER = ("sample_id", "class_id", "score", "x", "y", "w", "l", "yaw")


def write_boxes_csv(stream: TextIO, boxes_per_sample: Sequence[Sequence[BoxBEV]], header: bool = True) -> None:
    writer = csv.writer(stream)
    if header:
        writer.writerow(BOX_CSV_HEADER)
    for sample_id, boxes in enumerate(boxes_per_sample):
        for b in boxes:
            writer.writerow((sample_id, b.class_id, repr(b.score), repr(b.x), repr(b.y),
                             repr(b.w), repr(b.l), repr(b.yaw)))


def read_boxes_csv(stream: TextIO) -> dict[int, list[BoxBEV]]:
    out: dict[int, list[BoxBEV]] = {}
    for r in csv.DictReader(stream):
        box = BoxBEV(float(r["x"]), float(r["y"]), float(r["w"]), float(r["l"]), float(r["yaw"]),
                     int(r["class_id"]), float(r["score"]))
        out.setdefault(int(r["sample_id"]), []).append(box)
    return out
