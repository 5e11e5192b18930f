"""Optimizer, schedule, EMA, checkpoints and the training loop for both arms."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import TrainConfig, dump_config
from .ctab import GateLog, read_gates
from .data import Batch, Prefetcher, TrainData, eval_batches, eval_scenes
from .det import decode_boxes
from .losses import LOSS_CSV_HEADER, LossBundle, det_loss, huw_combine, seg_loss
from .metrics import DetectionResult, IouAccumulator, detection_metrics
from .model import MultiTaskModel, build_model
from .synth import Scene
from .tensor import Parameter, Tensor

CHECKPOINT_VERSION = 1
SCORE_THRESH = 0.3
MAX_DETS = 50


def lr_schedule(step: int, peak_lr: float, warmup_iters: int, total_steps: int) -> float:
    """Linear ramp 0 -> peak over ``warmup_iters``, then half-cosine down to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if step < warmup_iters:
        return peak_lr * step / warmup_iters
    span = total_steps - warmup_iters
    progress = min((step - warmup_iters) / span, 1.0) if span > 0 else 1.0
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam moments with decoupled weight decay on parameters flagged ``decay``."""

    def __init__(self, named_params: Sequence[tuple[str, Parameter]], weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(named_params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self, lr: float) -> None:
        missing = [n for n, p in self.params if p.grad is None]
        if missing:
            raise RuntimeError(f"no gradient for learnable parameter(s): {', '.join(missing)}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name, p in self.params:
            g = p.grad.astype(p.dtype, copy=False)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            data = p.data
            if p.decay and self.weight_decay:
                data = data * (1 - lr * self.weight_decay)
            p.data = (data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class Ema:
    """Shadow copy of every learnable, blended toward the live values after each step.

    With ``warmup`` the effective decay is min(decay, (1 + t) / (10 + t)), so the
    shadow is not dominated by the initialization on short runs.
    """

    def __init__(self, named_params: Sequence[tuple[str, Parameter]], decay: float = 0.999, warmup: bool = True):
        self.params = list(named_params)
        self.decay = decay
        self.warmup = warmup
        self.updates = 0
        self.shadow = {n: p.data.copy() for n, p in self.params}

    def current_decay(self) -> float:
        if not self.warmup:
            return self.decay
        return min(self.decay, (1 + self.updates) / (10 + self.updates))

    def update(self) -> None:
        d = self.current_decay()
        for name, p in self.params:
            s = self.shadow[name]
            s *= d
            s += (1 - d) * p.data
        self.updates += 1


# ---------------------------------------------------------------------------
# checkpoints: a single .npz with prefixed array names and a JSON meta blob
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: MultiTaskModel, opt: AdamW, ema: Ema, step: int, cfg: TrainConfig) -> None:
    arrays = {}
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.data
        arrays[f"ema/{name}"] = ema.shadow[name]
        arrays[f"adam_m/{name}"] = opt.m[name]
        arrays[f"adam_v/{name}"] = opt.v[name]
    meta = {"version": CHECKPOINT_VERSION, "step": step, "adam_t": opt.t, "ema_updates": ema.updates,
            "arm": cfg.arm, "config": cfg.to_dict()}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


@dataclass
class Checkpoint:
    meta: dict
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]

    @property
    def config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.meta["config"])


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "ema": {}, "adam_m": {}, "adam_v": {}}
        for key in z.files:
            if key == "meta":
                continue
            group, name = key.split("/", 1)
            groups[group][name] = z[key]
    return Checkpoint(meta, groups["param"], groups["ema"], groups["adam_m"], groups["adam_v"])


def model_from_checkpoint(ckpt: Checkpoint, use_ema: bool = True) -> MultiTaskModel:
    cfg = ckpt.config
    model = build_model(cfg.dims, cfg.arm, cfg.seed)
    model.load_state_dict(ckpt.ema if use_ema else ckpt.params)
    return model


# ---------------------------------------------------------------------------
# one optimization step
# ---------------------------------------------------------------------------

def compute_losses(model: MultiTaskModel, batch: Batch) -> tuple[Tensor, LossBundle]:
    out = model(Tensor(batch.inputs))
    l_seg, focal, dice = seg_loss(out.seg_logits, batch.seg_gt)
    l_det, hm, l1 = det_loss(out.heatmap, out.reg, batch.heatmap, batch.reg, batch.reg_mask)
    total = huw_combine(model.huw, l_det, l_seg)
    s_det, s_seg = model.huw.sigmas()
    bundle = LossBundle(hm.item(), l1.item(), focal.item(), dice.item(), l_det.item(), l_seg.item(),
                        total.item(), s_det, s_seg)
    return total, bundle


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, bundle: LossBundle):
        super().__init__(f"non-finite loss at step {step}: {bundle}")
        self.step = step
        self.bundle = bundle


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    class_names: tuple[str, ...]
    iou: np.ndarray
    miou: float
    detection: DetectionResult
    predictions: list[list] = field(repr=False)
    ground_truth: list[list] = field(repr=False)
    seg_probs: list[np.ndarray] = field(repr=False, default_factory=list)

    def row(self) -> dict[str, float]:
        out = {name: float(v) for name, v in zip(self.class_names, self.iou)}
        out["mIoU"] = self.miou
        out["mAP"] = self.detection.mean_ap
        out["yaw_err"] = self.detection.yaw_error
        return out

    def summary(self) -> dict:
        return {"iou": self.row(), "ap": {str(k): v for k, v in self.detection.ap.items()},
                "num_gt_boxes": self.detection.num_gt}


def evaluate(model: MultiTaskModel, scenes: list[Scene], cfg: TrainConfig, noise_seed: int,
             keep_probs: bool = False) -> EvalResult:
    from .data import scene_config
    scfg = scene_config(cfg.dims)
    acc = IouAccumulator(cfg.dims.C)
    preds, gts, probs_out = [], [], []
    for batch in eval_batches(scenes, cfg, noise_seed):
        out = model(Tensor(batch.inputs))
        probs = T.sigmoid(out.seg_logits).data
        acc.update(probs, batch.seg_gt)
        if keep_probs:
            probs_out.append(probs)
        for b in range(len(batch)):
            preds.append(decode_boxes(out.heatmap.data[b], out.reg.data[b], SCORE_THRESH, MAX_DETS,
                                      scfg.coarse_grid))
            gts.append(batch.boxes[b])
    res = acc.result()
    return EvalResult(scfg.class_names, res.iou_max, res.miou, detection_metrics(preds, gts), preds, gts, probs_out)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

@dataclass
class TrainReport:
    run_dir: Path
    steps_done: int
    final: LossBundle
    metrics: dict
    seconds: float


class RunDirExists(FileExistsError):
    pass


def prepare_run_dir(root, cfg: TrainConfig, force: bool = False) -> Path:
    run_dir = Path(root) / cfg.run_name()
    if (run_dir / "DONE").exists() and not force:
        raise RunDirExists(f"{run_dir} already holds a finished run; pass --force to overwrite")
    run_dir.mkdir(parents=True, exist_ok=True)
    for stale in ("DONE", "losses.csv", "gates.csv", "checkpoint.npz", "metrics.json"):
        (run_dir / stale).unlink(missing_ok=True)
    return run_dir


def train(cfg: TrainConfig, run_dir, stop_at: int | None = None, resume: bool = False,
          evaluate_at_end: bool = True, eval_on_train: bool = False,
          log: Callable[[str], None] | None = None, log_every: int = 50) -> TrainReport:
    """Run (or continue) training into ``run_dir``.

    ``stop_at`` ends early after that many steps, leaving a resumable checkpoint;
    ``resume`` picks up from ``run_dir/checkpoint.npz``.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    stop = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    t0 = time.perf_counter()

    model = build_model(cfg.dims, cfg.arm, cfg.seed)
    named = list(model.named_parameters())
    opt = AdamW(named, cfg.weight_decay)
    ema = Ema(named, cfg.ema_decay)
    start = 0
    if resume:
        ckpt = load_checkpoint(run_dir / "checkpoint.npz")
        if ckpt.config != cfg:
            raise ValueError("checkpoint config differs from the requested config")
        model.load_state_dict(ckpt.params)
        for name, _ in named:
            opt.m[name][...] = ckpt.adam_m[name]
            opt.v[name][...] = ckpt.adam_v[name]
            ema.shadow[name][...] = ckpt.ema[name]
        opt.t = ckpt.meta["adam_t"]
        ema.updates = ckpt.meta["ema_updates"]
        start = ckpt.meta["step"]
    else:
        (run_dir / "config.txt").write_text(dump_config(cfg))

    mode = "a" if resume else "w"
    loss_fh = open(run_dir / "losses.csv", mode, newline="")
    gate_fh = open(run_dir / "gates.csv", mode, newline="") if model.has_ctab else None
    loss_writer = csv.writer(loss_fh)
    if not resume:
        loss_writer.writerow(LOSS_CSV_HEADER)
    gate_log = GateLog(gate_fh, write_header=not resume) if gate_fh else None

    data = TrainData(cfg)
    feed = Prefetcher(data, start, stop, cfg.queue_size)
    bundle = None
    try:
        for step, batch in feed:
            lr = lr_schedule(step + 1, cfg.peak_lr, cfg.warmup_iters, cfg.steps)
            if gate_log:
                gate_log.append(read_gates(model.ctab, step))
            model.zero_grad()
            total, bundle = compute_losses(model, batch)
            if not bundle.is_finite():
                raise TrainingDiverged(step, bundle)
            total.backward()
            opt.step(lr)
            ema.update()
            loss_writer.writerow(bundle.csv_row(step, lr))
            loss_fh.flush()
            if log and (step % log_every == 0 or step == stop - 1):
                log(f"step {step:5d}  lr {lr:.2e}  total {bundle.l_total:.4f}  "
                    f"seg {bundle.l_seg:.4f}  det {bundle.l_det:.4f}")
    finally:
        feed.close()
        loss_fh.close()
        if gate_fh:
            gate_fh.close()

    save_checkpoint(run_dir / "checkpoint.npz", model, opt, ema, stop, cfg)
    metrics: dict = {}
    if stop == cfg.steps and evaluate_at_end:
        shadow = build_model(cfg.dims, cfg.arm, cfg.seed)
        shadow.load_state_dict(ema.shadow)
        result = evaluate(shadow, eval_scenes(cfg), cfg, cfg.eval_seed)
        metrics["eval"] = result.summary()
        if eval_on_train and data.pool:
            metrics["train"] = evaluate(shadow, data.pool, cfg, cfg.seed).summary()
        if model.has_ctab:
            g = read_gates(model.ctab, stop)
            metrics["gates"] = {"sigma_g_det": g.sigma_g_det, "sigma_g_seg": g.sigma_g_seg}
        (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, default=_json_float))
        (run_dir / "DONE").write_text("")
    seconds = time.perf_counter() - t0
    return TrainReport(run_dir, stop, bundle, metrics, seconds)


def _json_float(x):
    return float(x)
