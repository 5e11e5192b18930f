"""The full multi-task network for both experiment arms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import Dims
from .ctab import CtabModule
from .det import DetHead
from .layers import ConvNormAct, Module
from .losses import HuwParams
from .seg import BevUpsampler, SegDecoder
from .tensor import Tensor


class ToyEncoder(Module):
    """Stand-in BEV backbone: stride-1 conv blocks mapping the pseudo-sensor channels to F_bev."""

    def __init__(self, in_channels: int, widths: tuple[int, ...], out_channels: int, rng: np.random.Generator):
        chans = (in_channels, *widths, out_channels)
        self.blocks = [ConvNormAct(a, b, 3, rng) for a, b in zip(chans[:-1], chans[1:])]
        self.in_channels = in_channels

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"encoder expects B x {self.in_channels} x H x W input, got {x.shape}")
        for block in self.blocks:
            x = block(x)
        return x


@dataclass
class Outputs:
    seg_logits: Tensor  # (B, C, H', W')
    heatmap: Tensor  # (B, C_obj, H, W)
    reg: Tensor  # (B, 6, H, W)


class MultiTaskModel(Module):
    def __init__(self, dims: Dims, arm: str, rng: np.random.Generator):
        if arm not in ("baseline", "ctab"):
            raise ValueError(f"unknown arm {arm!r}")
        self.encoder = ToyEncoder(dims.in_channels, dims.encoder_widths, dims.C_bev, rng)
        self.decoder = SegDecoder(dims.C_bev, dims.C, rng, width=dims.seg_width)
        self.upsampler = BevUpsampler(dims.seg_width, rng)
        self.det_head = DetHead(dims.C_bev, dims.C_obj, rng, hidden=dims.det_hidden)
        # the bridge only exists in the ctab arm, so the baseline checkpoint has no trace of it
        if arm == "ctab":
            self.ctab = CtabModule(dims.C_bev, dims.seg_width, dims.d, dims.h, dims.K, rng)
        self.huw = HuwParams()
        self.arm = arm
        self.dims = dims

    @property
    def has_ctab(self) -> bool:
        return "ctab" in vars(self)

    def forward(self, inputs: Tensor) -> Outputs:
        f_bev = self.encoder(inputs)
        f_seg = self.decoder.features(f_bev)
        f_det = f_bev
        if self.has_ctab:
            f_det, f_seg = self.ctab(f_det, f_seg)
        seg_logits = self.decoder.predict(self.upsampler(f_seg))
        heatmap, reg = self.det_head(f_det)
        return Outputs(seg_logits, heatmap, reg)


def build_model(dims: Dims, arm: str, seed: int) -> MultiTaskModel:
    return MultiTaskModel(dims, arm, np.random.default_rng(seed))


@dataclass(frozen=True)
class ParamLedger:
    decoder: int
    upsampler: int
    ctab: int

    @property
    def total(self) -> int:
        return self.decoder + self.upsampler + self.ctab


def param_ledger(dims: Dims, seed: int = 0) -> ParamLedger:
    """Exact parameter counts of the three added components at the given dims."""
    rng = np.random.default_rng(seed)
    decoder = SegDecoder(dims.C_bev, dims.C, rng, width=dims.seg_width)
    upsampler = BevUpsampler(dims.seg_width, rng)
    ctab = CtabModule(dims.C_bev, dims.seg_width, dims.d, dims.h, dims.K, rng)
    return ParamLedger(decoder.num_parameters(), upsampler.num_parameters(), ctab.num_parameters())
