"""Segmentation decoder, learnable BEV upsampling and the class head.

Every normalization in this branch is instance normalization.
"""
from __future__ import annotations

import numpy as np

from .layers import Conv2d, ConvNormAct, Module
from .ops import bilinear_resize
from .tensor import Parameter, Tensor, get_dtype, relu

UPSAMPLE_RATIO = 1.5625  # 128 -> 200 cells
HEAD_PRIOR_BIAS = -4.59  # sigmoid(-4.59) ~ 0.01


class ResidualBlock(Module):
    def __init__(self, width: int, rng: np.random.Generator):
        self.first = ConvNormAct(width, width, 3, rng)
        self.second = ConvNormAct(width, width, 3, rng, act=False)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.second(self.first(x)) + x)


class SegHead(Module):
    def __init__(self, width: int, num_classes: int, rng: np.random.Generator):
        self.hidden = ConvNormAct(width, width, 3, rng)
        self.classifier = Conv2d(width, num_classes, 1, rng)
        self.classifier.bias = Parameter(np.full(num_classes, HEAD_PRIOR_BIAS, dtype=get_dtype()), decay=False)

    def forward(self, x: Tensor) -> Tensor:
        return self.classifier(self.hidden(x))


class SegDecoder(Module):
    def __init__(self, in_channels: int, num_classes: int, rng: np.random.Generator,
                 width: int = 128, num_blocks: int = 3):
        self.in_proj = ConvNormAct(in_channels, width, 3, rng)
        self.blocks = [ResidualBlock(width, rng) for _ in range(num_blocks)]
        self.head = SegHead(width, num_classes, rng)
        self.width = width

    def features(self, f_bev: Tensor) -> Tensor:
        """The tap point fed to the bridge: output of the last residual block."""
        if f_bev.shape[1] != self.in_proj.conv.in_channels:
            raise ValueError(
                f"decoder expects {self.in_proj.conv.in_channels} input channels, got {f_bev.shape[1]}"
            )
        x = self.in_proj(f_bev)
        for block in self.blocks:
            x = block(x)
        return x

    def predict(self, f: Tensor) -> Tensor:
        if f.shape[1] != self.width:
            raise ValueError(f"head expects {self.width} channels, got {f.shape[1]}")
        return self.head(f)

    def decode(self, f_bev: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (F_seg, native-resolution logits)."""
        f_seg = self.features(f_bev)
        return f_seg, self.predict(f_seg)

    forward = decode


def upsampled_size(height: int, width: int, ratio: float = UPSAMPLE_RATIO) -> tuple[int, int]:
    return int(round(height * ratio)), int(round(width * ratio))


class BevUpsampler(Module):
    """U = resize(F); out = U + IN(conv(ReLU(IN(conv(U)))))."""

    def __init__(self, width: int, rng: np.random.Generator, ratio: float = UPSAMPLE_RATIO):
        self.refine_in = ConvNormAct(width, width, 3, rng)
        self.refine_out = ConvNormAct(width, width, 3, rng, act=False)
        self.ratio = ratio

    def forward(self, f_seg: Tensor) -> Tensor:
        H, W = f_seg.shape[2:]
        if H < 2 or W < 2:
            raise ValueError(f"upsampling needs H, W >= 2, got {(H, W)}")
        u = bilinear_resize(f_seg, *upsampled_size(H, W, self.ratio))
        return u + self.refine_out(self.refine_in(u))

    def zero_refinement(self) -> None:
        """Zero the residual path so the module reduces to plain bilinear resize."""
        for p in self.refine_in.parameters() + self.refine_out.parameters():
            p.data = np.zeros_like(p.data)
