"""Cross-task attention bridge between the detection and segmentation branches."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import TextIO

import numpy as np

from .layers import Conv2d, ConvNormAct, GroupNorm, Module
from .msda import MsdaLayer, make_reference_grid
from .tensor import Parameter, Tensor, sigmoid

GATE_INIT = -2.0


@dataclass(frozen=True)
class GateState:
    step: int
    sigma_g_det: float
    sigma_g_seg: float

    def __post_init__(self):
        if self.step < 0:
            raise ValueError(f"step must be non-negative, got {self.step}")


def _to_tokens(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    return x.reshape(B, C, H * W).transpose(0, 2, 1)


def _to_map(x: Tensor, height: int, width: int) -> Tensor:
    B, N, C = x.shape
    return x.transpose(0, 2, 1).reshape(B, C, height, width)


class CtabModule(Module):
    def __init__(self, det_channels: int, seg_channels: int, d: int, heads: int, points: int,
                 rng: np.random.Generator, gate_init: float = GATE_INIT):
        self.det_in_proj = ConvNormAct(det_channels, d, 1, rng, norm="group")
        self.seg_in_proj = ConvNormAct(seg_channels, d, 1, rng, norm="group")
        self.msda_s2d = MsdaLayer(d, heads, points, rng)
        self.msda_d2s = MsdaLayer(d, heads, points, rng)
        self.det_out_conv = Conv2d(d, det_channels, 3, rng)
        self.det_out_norm = GroupNorm(det_channels)
        self.seg_out_conv = Conv2d(d, seg_channels, 3, rng)
        self.seg_out_norm = GroupNorm(seg_channels)
        self.g_det = Parameter(np.array([gate_init]), decay=False)
        self.g_seg = Parameter(np.array([gate_init]), decay=False)
        self._grids: dict[tuple[int, int], object] = {}

    def _grid(self, height: int, width: int):
        key = (height, width)
        if key not in self._grids:
            self._grids[key] = make_reference_grid(height, width)
        return self._grids[key]

    def forward(self, f_det: Tensor, f_seg: Tensor, order: str = "s2d-first") -> tuple[Tensor, Tensor]:
        if f_det.ndim != 4 or f_seg.ndim != 4:
            raise ValueError(f"expected B x C x H x W maps, got {f_det.shape} and {f_seg.shape}")
        B, _, H, W = f_det.shape
        if f_seg.shape[0] != B or f_seg.shape[2:] != (H, W):
            raise ValueError(f"branch maps disagree: {f_det.shape} vs {f_seg.shape}")
        ref = self._grid(H, W)

        det_tokens = _to_tokens(self.det_in_proj(f_det))
        seg_tokens = _to_tokens(self.seg_in_proj(f_seg))

        # both directions read only the projected inputs, never each other's output
        def s2d():
            return self.msda_s2d(det_tokens, seg_tokens, (H, W), ref)

        def d2s():
            return self.msda_d2s(seg_tokens, det_tokens, (H, W), ref)

        if order == "s2d-first":
            a_s2d = s2d()
            a_d2s = d2s()
        elif order == "d2s-first":
            a_d2s = d2s()
            a_s2d = s2d()
        else:
            raise ValueError(f"unknown order {order!r}")

        det_update = self.det_out_norm(self.det_out_conv(_to_map(a_s2d, H, W)))
        seg_update = self.seg_out_norm(self.seg_out_conv(_to_map(a_d2s, H, W)))
        out_det = sigmoid(self.g_det) * det_update + f_det
        out_seg = sigmoid(self.g_seg) * seg_update + f_seg
        return out_det, out_seg

    def read_gates(self, step: int = 0) -> GateState:
        return read_gates(self, step)


def _sig(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def read_gates(module: CtabModule, step: int = 0) -> GateState:
    return GateState(step, _sig(module.g_det.item()), _sig(module.g_seg.item()))


class GateLog:
    """Appends ``step,sigma_g_det,sigma_g_seg`` rows to a CSV stream."""

    header = ("step", "sigma_g_det", "sigma_g_seg")

    def __init__(self, stream: TextIO, write_header: bool = True):
        self._writer = csv.writer(stream)
        self._stream = stream
        if write_header:
            self._writer.writerow(self.header)

    def append(self, state: GateState) -> None:
        self._writer.writerow((state.step, repr(state.sigma_g_det), repr(state.sigma_g_seg)))


def read_gate_csv(path) -> list[GateState]:
    with open(path, newline="") as fh:
        return [
            GateState(int(r["step"]), float(r["sigma_g_det"]), float(r["sigma_g_seg"]))
            for r in csv.DictReader(fh)
        ]
