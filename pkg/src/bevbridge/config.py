"""Model dims and training configuration, with a flat ``key = value`` file format.

Config file schema (one entry per line, ``#`` starts a comment)::

    arm = ctab                 # baseline | ctab
    seed = 0
    steps = 500
    peak_lr = 0.0004
    warmup_iters = 50
    batch_size = 8
    weight_decay = 0.01
    ema_decay = 0.999
    num_scenes = 0             # 0: fresh scenes every step; N: fixed pool of N scenes
    augment = true
    eval_scenes = 16
    dims = toy                 # preset name; individual dims.* keys override it
    dims.H = 32
    dims.C_bev = 64
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

ARMS = ("baseline", "ctab")


@dataclass(frozen=True)
class Dims:
    H: int = 32
    W: int = 32
    C_bev: int = 64
    seg_width: int = 32
    d: int = 32
    h: int = 4
    K: int = 4
    C: int = 5
    C_obj: int = 1
    det_hidden: int = 32
    encoder_widths: tuple[int, ...] = (64, 128)
    in_channels: int = 6

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            vals = v if isinstance(v, tuple) else (v,)
            if not all(isinstance(x, int) and x > 0 for x in vals):
                raise ValueError(f"dims.{f.name} must be positive integers, got {v!r}")
        if self.d % self.h:
            raise ValueError(f"dims.d={self.d} must be divisible by dims.h={self.h}")
        if self.H < 2 or self.W < 2:
            raise ValueError(f"dims.H and dims.W must be >= 2, got {(self.H, self.W)}")


DIMS_PRESETS = {
    "toy": Dims(),
    # widths named for the full model; encoder is a stand-in and does not enter the ledger
    "paper": Dims(H=128, W=128, C_bev=256, seg_width=128, d=128, h=8, K=4, C=7, C_obj=1,
                  det_hidden=64, encoder_widths=(64, 128)),
}


def dims_preset(name: str) -> Dims:
    try:
        return DIMS_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown dims preset {name!r}; choose from {sorted(DIMS_PRESETS)}") from None


@dataclass(frozen=True)
class TrainConfig:
    arm: str = "ctab"
    seed: int = 0
    steps: int = 500
    peak_lr: float = 4e-4
    warmup_iters: int = 50
    batch_size: int = 8
    weight_decay: float = 0.01
    ema_decay: float = 0.999
    num_scenes: int = 0
    augment: bool = True
    eval_scenes: int = 16
    eval_seed: int = 1_000_000
    queue_size: int = 2
    dims: Dims = field(default_factory=Dims)

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ValueError(f"arm must be one of {ARMS}, got {self.arm!r}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not 0 <= self.warmup_iters < self.steps:
            raise ValueError(f"warmup_iters must be in [0, steps), got {self.warmup_iters} with steps={self.steps}")
        for name in ("batch_size", "queue_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("num_scenes", "eval_scenes", "seed", "eval_seed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.peak_lr > 0:
            raise ValueError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 <= self.ema_decay < 1:
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["dims"]["encoder_widths"] = list(self.dims.encoder_widths)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        data = dict(data)
        dims = dict(data.pop("dims", {}))
        if "encoder_widths" in dims:
            dims["encoder_widths"] = tuple(dims["encoder_widths"])
        return cls(dims=Dims(**dims), **data)

    def digest(self) -> str:
        """Hash of everything except the seed, so seeds of one config share a prefix."""
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def run_name(self) -> str:
        return f"{self.digest()}-s{self.seed}"

    def with_overrides(self, overrides: dict[str, str]) -> "TrainConfig":
        return parse_pairs(overrides, base=self)


def _convert(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == "tuple":
            return tuple(int(x) for x in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ValueError(f"config field {name!r}: cannot parse {raw!r}") from None


_TOP_KINDS = {f.name: f.type for f in fields(TrainConfig) if f.name != "dims"}
_TYPE_MAP = {"int": int, "float": float, "bool": bool, "str": str}


def parse_pairs(pairs: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    top: dict[str, Any] = {}
    dims = base.dims
    dim_over: dict[str, Any] = {}
    for key, raw in pairs.items():
        key = key.strip()
        if key == "dims":
            dims = dims_preset(raw.strip())
        elif key.startswith("dims."):
            name = key[5:]
            valid = {f.name: f for f in fields(Dims)}
            if name not in valid:
                raise ValueError(f"unknown config field {key!r}")
            dim_over[name] = _convert(key, raw, "tuple" if name == "encoder_widths" else int)
        elif key in _TOP_KINDS:
            top[key] = _convert(key, raw, _TYPE_MAP[_TOP_KINDS[key]])
        else:
            raise ValueError(f"unknown config field {key!r}")
    try:
        dims = replace(dims, **dim_over)
        return replace(base, dims=dims, **top)
    except ValueError as exc:
        raise ValueError(f"invalid config: {exc}") from None


def parse_config_text(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path, overrides: dict[str, str] | None = None) -> TrainConfig:
    pairs = parse_config_text(Path(path).read_text())
    pairs.update(overrides or {})
    return parse_pairs(pairs)


def dump_config(cfg: TrainConfig) -> str:
    lines = [f"{k} = {v}" for k, v in cfg.to_dict().items() if k != "dims"]
    for k, v in asdict(cfg.dims).items():
        lines.append(f"dims.{k} = {' '.join(map(str, v)) if isinstance(v, (tuple, list)) else v}")
    return "\n".join(lines) + "\n"
