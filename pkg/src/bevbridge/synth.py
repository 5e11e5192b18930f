"""Synthetic BEV scenes: continuous geometry, augmentation and rasterization.

A scene is a straight road (convex drivable polygon) with sidewalk bands on
both sides, optional lane dividers and pedestrian crossings, and a handful of
non-overlapping vehicles. All augmentation happens on the continuous geometry,
so masks and boxes rasterized afterwards always agree.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .det import BoxBEV, GridMeta, wrap_angle

CLASSES_5 = ("drivable", "ped_crossing", "walkway", "divider", "vehicle")
CLASSES_7 = ("drivable", "carpark", "ped_crossing", "walkway", "stop_line", "divider", "vehicle")
INPUT_CHANNELS = 6
MAX_BDA_ROT = math.radians(22.5)
BDA_SCALE_RANGE = (0.95, 1.05)
SCENE_FORMAT = "bevbridge-scenes"
SCENE_FORMAT_VERSION = 1


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    coarse_cells: int = 32
    cell_size: float = 0.8
    upsample_ratio: float = 1.5625
    num_classes: int = 5
    vehicles: tuple[int, int] = (1, 6)
    road_width: tuple[float, float] = (9.0, 14.0)
    walkway_width: tuple[float, float] = (2.0, 3.5)
    max_dividers: int = 3
    max_crossings: int = 2
    divider_width: float = 0.2
    min_vehicle_gap: float = 3.0
    max_attempts: int = 200
    input_noise: float = 0.1
    radar_points_per_vehicle: int = 8
    radar_dropout: float = 0.3

    def __post_init__(self):
        if self.num_classes not in (5, 7):
            raise ValueError(f"num_classes must be 5 or 7, got {self.num_classes}")
        lo, hi = self.vehicles
        if not 0 <= lo <= hi:
            raise ValueError(f"bad vehicle count range {self.vehicles}")

    @property
    def extent(self) -> float:
        return self.coarse_cells * self.cell_size

    @property
    def fine_cells(self) -> int:
        return int(round(self.coarse_cells * self.upsample_ratio))

    @property
    def coarse_grid(self) -> GridMeta:
        return GridMeta.centered(self.coarse_cells, self.cell_size)

    @property
    def fine_grid(self) -> GridMeta:
        return GridMeta.centered(self.fine_cells, self.extent / self.fine_cells)

    @property
    def class_names(self) -> tuple[str, ...]:
        return CLASSES_5 if self.num_classes == 5 else CLASSES_7


@dataclass
class Scene:
    seed: int
    extent: float
    drivable: np.ndarray
    walkways: list[np.ndarray] = field(default_factory=list)
    dividers: list[np.ndarray] = field(default_factory=list)
    divider_width: float = 0.2
    crossings: list[np.ndarray] = field(default_factory=list)
    vehicles: list[BoxBEV] = field(default_factory=list)

    def to_record(self) -> dict:
        flat = lambda a: [float(v) for v in np.asarray(a).reshape(-1)]  # noqa: E731
        return {
            "seed": int(self.seed),
            "extent": float(self.extent),
            "drivable": flat(self.drivable),
            "walkways": [flat(w) for w in self.walkways],
            "dividers": [flat(d) for d in self.dividers],
            "divider_width": float(self.divider_width),
            "crossings": [flat(c) for c in self.crossings],
            "vehicles": [[b.x, b.y, b.w, b.l, b.yaw, b.class_id] for b in self.vehicles],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Scene":
        pts = lambda a: np.asarray(a, dtype=np.float64).reshape(-1, 2)  # noqa: E731
        return cls(
            seed=int(rec["seed"]),
            extent=float(rec["extent"]),
            drivable=pts(rec["drivable"]),
            walkways=[pts(w) for w in rec["walkways"]],
            dividers=[pts(d) for d in rec["dividers"]],
            divider_width=float(rec["divider_width"]),
            crossings=[pts(c) for c in rec["crossings"]],
            vehicles=[BoxBEV(x, y, w, l, yaw, int(c)) for x, y, w, l, yaw, c in rec["vehicles"]],
        )

    def same_as(self, other: "Scene", atol: float = 0.0) -> bool:
        a, b = self.to_record(), other.to_record()
        if a.keys() != b.keys():
            return False
        for key in a:
            x, y = a[key], b[key]
            if isinstance(x, list):
                if len(x) != len(y):
                    return False
                for u, v in zip(x, y):
                    if not np.allclose(u, v, rtol=0, atol=atol):
                        return False
            elif not np.isclose(x, y, rtol=0, atol=atol):
                return False
        return True


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def in_convex_polygon(poly: np.ndarray, px, py) -> np.ndarray:
    """Inside-or-on-boundary test for a convex polygon of either winding."""
    px, py = np.asarray(px, dtype=np.float64), np.asarray(py, dtype=np.float64)
    pos = np.ones(np.broadcast(px, py).shape, dtype=bool)
    neg = pos.copy()
    n = len(poly)
    for k in range(n):
        (x0, y0), (x1, y1) = poly[k], poly[(k + 1) % n]
        cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        pos &= cross >= -1e-12
        neg &= cross <= 1e-12
    return pos | neg


def distance_to_polyline(line: np.ndarray, px, py) -> np.ndarray:
    px, py = np.asarray(px, dtype=np.float64), np.asarray(py, dtype=np.float64)
    best = np.full(np.broadcast(px, py).shape, np.inf)
    for (x0, y0), (x1, y1) in zip(line[:-1], line[1:]):
        dx, dy = x1 - x0, y1 - y0
        denom = dx * dx + dy * dy
        t = np.clip(((px - x0) * dx + (py - y0) * dy) / denom, 0, 1) if denom else 0.0
        best = np.minimum(best, np.hypot(px - (x0 + t * dx), py - (y0 + t * dy)))
    return best


def boxes_overlap(a: BoxBEV, b: BoxBEV) -> bool:
    """Separating-axis test for two oriented rectangles (touching counts as overlap)."""
    ca, cb = a.corners(), b.corners()
    for poly in (ca, cb):
        for k in range(4):
            edge = poly[(k + 1) % 4] - poly[k]
            axis = np.array([-edge[1], edge[0]])
            pa, pb = ca @ axis, cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def _rect(center: np.ndarray, along: np.ndarray, across: np.ndarray, half_len: float, half_wid: float) -> np.ndarray:
    return np.array([
        center + half_len * along + half_wid * across,
        center - half_len * along + half_wid * across,
        center - half_len * along - half_wid * across,
        center + half_len * along - half_wid * across,
    ])


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def generate_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> Scene:
    rng = np.random.default_rng(seed)
    extent = cfg.extent
    half = extent / 2
    phi = rng.uniform(0, np.pi)
    along = np.array([math.cos(phi), math.sin(phi)])
    across = np.array([-along[1], along[0]])
    road_w = rng.uniform(*cfg.road_width)
    center = rng.uniform(-0.12, 0.12) * extent * across
    half_len = extent  # long enough to cross the whole grid at any angle
    drivable = _rect(center, along, across, half_len, road_w / 2)

    walkways = []
    for side in (1.0, -1.0):
        ww = rng.uniform(*cfg.walkway_width)
        c = center + side * (road_w / 2 + ww / 2) * across
        walkways.append(_rect(c, along, across, half_len, ww / 2))

    dividers = []
    n_div = int(rng.integers(0, cfg.max_dividers + 1))
    slots = np.linspace(-road_w / 2, road_w / 2, cfg.max_dividers + 2)[1:-1]
    for lateral in np.sort(rng.choice(slots, size=n_div, replace=False)) if n_div else []:
        bend = rng.uniform(-0.3, 0.3)
        base = center + lateral * across
        dividers.append(np.array([base - half_len * along, base + bend * across, base + half_len * along]))

    crossings = []
    for _ in range(int(rng.integers(0, cfg.max_crossings + 1))):
        t = rng.uniform(-0.35, 0.35) * extent
        length = rng.uniform(3.0, 4.0)
        crossings.append(_rect(center + t * along, along, across, length / 2, road_w / 2 - 0.2))

    vehicles: list[BoxBEV] = []
    lo, hi = cfg.vehicles
    target = int(rng.integers(lo, hi + 1))
    margin = 1.0
    for index in range(target):
        for _ in range(cfg.max_attempts):
            w = rng.uniform(1.7, 2.1)
            l = rng.uniform(4.0, 5.0)
            lateral = rng.uniform(-road_w / 2 + w / 2 + 0.2, road_w / 2 - w / 2 - 0.2)
            t = rng.uniform(-half, half)
            pos = center + t * along + lateral * across
            yaw = phi + (np.pi if rng.random() < 0.5 else 0.0) + rng.normal(0.0, 0.1)
            box = BoxBEV(float(pos[0]), float(pos[1]), float(w), float(l), float(yaw))
            if abs(box.x) > half - margin or abs(box.y) > half - margin:
                continue
            if not in_convex_polygon(drivable, box.x, box.y):
                continue
            if any(boxes_overlap(box, o) or math.hypot(box.x - o.x, box.y - o.y) < cfg.min_vehicle_gap
                   for o in vehicles):
                continue
            vehicles.append(box)
            break
        else:
            raise SceneGenerationError(
                f"seed {seed}: placed {index} of {target} vehicles after {cfg.max_attempts} attempts "
                f"(extent {extent:.1f} m, road width {road_w:.1f} m)"
            )

    return Scene(seed, extent, drivable, walkways, dividers, cfg.divider_width, crossings, vehicles)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BdaParams:
    flip_x: bool = False
    rot: float = 0.0
    scale: float = 1.0

    def validate(self) -> None:
        if abs(self.rot) > MAX_BDA_ROT + 1e-12:
            raise ValueError(f"rotation {math.degrees(self.rot):.2f} deg outside +-22.5 deg")
        lo, hi = BDA_SCALE_RANGE
        if not lo - 1e-12 <= self.scale <= hi + 1e-12:
            raise ValueError(f"scale {self.scale} outside [{lo}, {hi}]")

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rot), math.sin(self.rot)
        flip = np.diag([-1.0, 1.0]) if self.flip_x else np.eye(2)
        return self.scale * np.array([[c, -s], [s, c]]) @ flip


def sample_bda(rng: np.random.Generator) -> BdaParams:
    return BdaParams(
        flip_x=bool(rng.random() < 0.5),
        rot=float(rng.uniform(-MAX_BDA_ROT, MAX_BDA_ROT)),
        scale=float(rng.uniform(*BDA_SCALE_RANGE)),
    )


def apply_bda(scene: Scene, params: BdaParams) -> Scene:
    """Flip (x -> -x), then rotate, then scale every piece of geometry."""
    params.validate()
    if params == BdaParams():
        return scene
    m = params.matrix()
    move = lambda pts: np.asarray(pts) @ m.T  # noqa: E731
    vehicles = []
    for b in scene.vehicles:
        x, y = m @ np.array([b.x, b.y])
        yaw = (np.pi - b.yaw if params.flip_x else b.yaw) + params.rot
        vehicles.append(BoxBEV(float(x), float(y), b.w * params.scale, b.l * params.scale, float(yaw),
                               b.class_id, b.score))
    return Scene(
        seed=scene.seed,
        extent=scene.extent,
        drivable=move(scene.drivable),
        walkways=[move(w) for w in scene.walkways],
        dividers=[move(d) for d in scene.dividers],
        divider_width=scene.divider_width * params.scale,
        crossings=[move(c) for c in scene.crossings],
        vehicles=vehicles,
    )


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

@dataclass
class SampleEntry:
    inputs: np.ndarray  # (6, H, W)
    seg_gt: np.ndarray  # (C, H', W') in {0, 1}
    boxes: list[BoxBEV]  # detection ground truth inside the grid


def class_masks(scene: Scene, grid: GridMeta, class_names: Sequence[str]) -> np.ndarray:
    """Cell-center membership masks, one per class. Thin lines are at least half a cell wide."""
    X, Y = grid.cell_centers()
    masks = {name: np.zeros(X.shape, dtype=bool) for name in class_names}
    masks["drivable"] = in_convex_polygon(scene.drivable, X, Y)
    for poly in scene.crossings:
        masks["ped_crossing"] |= in_convex_polygon(poly, X, Y)
    for poly in scene.walkways:
        masks["walkway"] |= in_convex_polygon(poly, X, Y)
    reach = max(scene.divider_width / 2, grid.cell_size / 2)
    for line in scene.dividers:
        masks["divider"] |= distance_to_polyline(line, X, Y) <= reach
    masks["vehicle"] = vehicle_mask(scene.vehicles, grid)
    return np.stack([masks[name] for name in class_names]).astype(np.float32)


def vehicle_mask(boxes: Iterable[BoxBEV], grid: GridMeta) -> np.ndarray:
    X, Y = grid.cell_centers()
    out = np.zeros(X.shape, dtype=bool)
    for b in boxes:
        out |= b.contains(X, Y)
    return out


def radar_points(scene: Scene, rng: np.random.Generator, per_vehicle: int = 8,
                 dropout: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """Points drawn inside each vehicle box, plus the keep-mask after dropout."""
    pts = []
    for b in scene.vehicles:
        along = rng.uniform(-b.l / 2, b.l / 2, per_vehicle)
        across = rng.uniform(-b.w / 2, b.w / 2, per_vehicle)
        c, s = math.cos(b.yaw), math.sin(b.yaw)
        pts.append(np.stack([b.x + along * c - across * s, b.y + along * s + across * c], axis=1))
    allpts = np.concatenate(pts) if pts else np.zeros((0, 2))
    keep = rng.random(len(allpts)) >= dropout
    return allpts, keep


def _splat(points: np.ndarray, grid: GridMeta) -> np.ndarray:
    out = np.zeros((grid.height, grid.width))
    if len(points):
        cx, cy = grid.cell_coords(points[:, 0], points[:, 1])
        col, row = np.floor(cx).astype(int), np.floor(cy).astype(int)
        ok = (col >= 0) & (col < grid.width) & (row >= 0) & (row < grid.height)
        np.add.at(out, (row[ok], col[ok]), 1.0)
    return np.minimum(out, 1.0)


def in_grid(box: BoxBEV, grid: GridMeta) -> bool:
    cx, cy = grid.cell_coords(box.x, box.y)
    return 0 <= cx < grid.width and 0 <= cy < grid.height


def rasterize(scene: Scene, cfg: SceneConfig, rng: np.random.Generator) -> SampleEntry:
    """Pseudo-sensor inputs on the coarse grid and ground truth on the fine grid."""
    coarse = cfg.coarse_grid
    names = cfg.class_names
    cm = class_masks(scene, coarse, CLASSES_5)
    drivable, crossing, walkway, divider, vehicle = cm
    sigma = cfg.input_noise
    H, W = coarse.height, coarse.width

    def noise():
        return rng.normal(0.0, sigma, (H, W))

    pts, keep = radar_points(scene, rng, cfg.radar_points_per_vehicle, cfg.radar_dropout)
    inputs = np.stack([
        drivable + noise(),
        gaussian_filter(vehicle.astype(np.float64), 1.0) + 0.5 * noise(),
        _splat(pts[keep], coarse),
        divider + noise(),
        np.maximum(crossing, 0.5 * walkway) + noise(),
        noise(),
    ]).astype(np.float32)
    seg_gt = class_masks(scene, cfg.fine_grid, names)
    boxes = [b for b in scene.vehicles if in_grid(b, coarse)]
    return SampleEntry(inputs, seg_gt, boxes)


# ---------------------------------------------------------------------------
# serialization: one JSON object per line after a version header
# ---------------------------------------------------------------------------

def write_scenes(path, scenes: Iterable[Scene]) -> int:
    n = 0
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": SCENE_FORMAT, "version": SCENE_FORMAT_VERSION}) + "\n")
        for scene in scenes:
            fh.write(json.dumps(scene.to_record(), separators=(",", ":")) + "\n")
            n += 1
    return n


def read_scenes(path) -> list[Scene]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty scene file")
    header = json.loads(lines[0])
    if header.get("format") != SCENE_FORMAT or header.get("version") != SCENE_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported scene file header {header}")
    return [Scene.from_record(json.loads(line)) for line in lines[1:] if line.strip()]
