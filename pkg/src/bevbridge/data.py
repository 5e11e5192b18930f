"""Deterministic batch assembly: every batch is a pure function of (seed, step)."""
from __future__ import annotations

import queue
import threading
from dataclasses import dataclass

import numpy as np

from .config import Dims, TrainConfig
from .det import BoxBEV, encode_targets
from .synth import Scene, SceneConfig, apply_bda, generate_scene, rasterize, sample_bda

# stream tags keep the sub-seeds of different consumers apart
_SCENE, _STEP, _EVAL = 0, 1, 2


def sub_seed(*keys: int) -> int:
    """A 64-bit seed derived from a tuple of non-negative integers."""
    lo, hi = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, np.uint32)
    return int(hi) << 32 | int(lo)


def scene_config(dims: Dims) -> SceneConfig:
    if dims.H != dims.W:
        raise ValueError(f"synthetic scenes are square, got H={dims.H}, W={dims.W}")
    base = SceneConfig()
    lo, hi = base.vehicles
    if dims.H < base.coarse_cells:
        # fewer vehicles on smaller maps so placement stays feasible
        hi = max(lo, int(hi * (dims.H / base.coarse_cells) ** 2))
    return SceneConfig(coarse_cells=dims.H, num_classes=dims.C, vehicles=(lo, hi))


@dataclass
class Batch:
    inputs: np.ndarray  # (B, 6, H, W)
    seg_gt: np.ndarray  # (B, C, H', W')
    heatmap: np.ndarray  # (B, C_obj, H, W)
    reg: np.ndarray  # (B, 6, H, W)
    reg_mask: np.ndarray  # (B, H, W)
    boxes: list[list[BoxBEV]]

    def __len__(self) -> int:
        return self.inputs.shape[0]


def assemble(scenes: list[Scene], rngs: list[np.random.Generator], scfg: SceneConfig, num_obj: int,
             augment: bool) -> Batch:
    entries, targets = [], []
    for scene, rng in zip(scenes, rngs):
        if augment:
            scene = apply_bda(scene, sample_bda(rng))
        entry = rasterize(scene, scfg, rng)
        entries.append(entry)
        targets.append(encode_targets(entry.boxes, scfg.coarse_grid, num_obj))
    return Batch(
        inputs=np.stack([e.inputs for e in entries]),
        seg_gt=np.stack([e.seg_gt for e in entries]),
        heatmap=np.stack([t[0] for t in targets]).astype(np.float32),
        reg=np.stack([t[1] for t in targets]).astype(np.float32),
        reg_mask=np.stack([t[2] for t in targets]).astype(np.float32),
        boxes=[e.boxes for e in entries],
    )


class TrainData:
    """Training batches for a config; a fixed pool when ``num_scenes`` > 0, fresh scenes otherwise."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.scfg = scene_config(cfg.dims)
        self.pool = [generate_scene(sub_seed(cfg.seed, _SCENE, i), self.scfg) for i in range(cfg.num_scenes)]

    def batch(self, step: int) -> Batch:
        cfg = self.cfg
        if self.pool:
            if cfg.batch_size >= len(self.pool):
                idx = list(range(len(self.pool)))
            else:
                pick = np.random.default_rng(sub_seed(cfg.seed, _STEP, step))
                idx = sorted(pick.choice(len(self.pool), cfg.batch_size, replace=False).tolist())
            scenes = [self.pool[i] for i in idx]
        else:
            scenes = [generate_scene(sub_seed(cfg.seed, _STEP, step, b), self.scfg) for b in range(cfg.batch_size)]
        rngs = [np.random.default_rng(sub_seed(cfg.seed, _STEP, step, b, 1)) for b in range(len(scenes))]
        return assemble(scenes, rngs, self.scfg, cfg.dims.C_obj, cfg.augment)


def eval_scenes(cfg: TrainConfig) -> list[Scene]:
    """Held-out scenes, drawn from a seed stream disjoint from training."""
    scfg = scene_config(cfg.dims)
    return [generate_scene(sub_seed(cfg.eval_seed, _EVAL, i), scfg) for i in range(cfg.eval_scenes)]


def eval_batches(scenes: list[Scene], cfg: TrainConfig, noise_seed: int):
    scfg = scene_config(cfg.dims)
    for start in range(0, len(scenes), cfg.batch_size):
        chunk = scenes[start:start + cfg.batch_size]
        rngs = [np.random.default_rng(sub_seed(noise_seed, _EVAL, start + k, 1)) for k in range(len(chunk))]
        yield assemble(chunk, rngs, scfg, cfg.dims.C_obj, augment=False)


class Prefetcher:
    """Builds upcoming batches on a background thread, handing them over through a bounded queue.

    Batches depend only on (seed, step), so prefetching never changes results.
    """

    _DONE = object()

    def __init__(self, data: TrainData, start: int, stop: int, depth: int = 2):
        self._q: queue.Queue = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, args=(data, start, stop), daemon=True)
        self._thread.start()

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._q.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run(self, data: TrainData, start: int, stop: int) -> None:
        try:
            for step in range(start, stop):
                if not self._put((step, data.batch(step))):
                    return
            self._put(self._DONE)
        except BaseException as exc:  # forwarded to the consumer
            self._put(exc)

    def __iter__(self):
        while True:
            item = self._q.get()
            if item is self._DONE:
                return
            if isinstance(item, BaseException):
                raise item
            yield item

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5)
