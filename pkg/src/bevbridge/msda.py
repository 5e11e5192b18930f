"""Single-level deformable attention over a BEV value map.

Each query predicts, per head, K sampling offsets (in cell units) around its
reference point and K attention logits. Values are read at the offset
locations with ``grid_sample`` and blended with the softmaxed weights. There
is no internal residual: the output is the attention signal alone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Linear, Module
from .ops import grid_sample
from .tensor import Parameter, Tensor, get_dtype


@dataclass(frozen=True)
class ReferenceGrid:
    height: int
    width: int
    points: np.ndarray  # (H*W, 2), row-major, (u, v) in [0, 1]

    def __len__(self) -> int:
        return self.points.shape[0]


def make_reference_grid(height: int, width: int) -> ReferenceGrid:
    if height < 2 or width < 2:
        raise ValueError(f"reference grid needs H, W >= 2, got {(height, width)}")
    v, u = np.meshgrid(np.arange(height) / (height - 1), np.arange(width) / (width - 1), indexing="ij")
    pts = np.stack([u.reshape(-1), v.reshape(-1)], axis=1)
    return ReferenceGrid(height, width, pts)


def initial_offsets(heads: int, points: int) -> np.ndarray:
    """(heads, points, 2): head m points along angle 2*pi*m/heads, radius (k+1)/points cells."""
    theta = 2 * np.pi * np.arange(heads) / heads
    direction = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    radius = (np.arange(points) + 1) / points
    return direction[:, None, :] * radius[None, :, None]


class MsdaLayer(Module):
    def __init__(self, d: int, heads: int, points: int, rng: np.random.Generator, levels: int = 1):
        if levels != 1:
            raise ValueError("only single-level attention (L = 1) is supported")
        if d % heads:
            raise ValueError(f"embedding width {d} not divisible by {heads} heads")
        self.d, self.heads, self.points = d, heads, points
        self.value_proj = Linear(d, d, rng)
        self.offset_net = Linear(d, heads * points * 2, rng)
        self.weight_net = Linear(d, heads * points, rng)
        self.output_proj = Linear(d, d, rng)

        dt = get_dtype()
        self.offset_net.weight = Parameter(np.zeros((heads * points * 2, d), dtype=dt))
        self.offset_net.bias = Parameter(initial_offsets(heads, points).reshape(-1).astype(dt), decay=False)
        self.weight_net.weight = Parameter(np.zeros((heads * points, d), dtype=dt))
        self.weight_net.bias = Parameter(np.zeros(heads * points, dtype=dt), decay=False)

    def forward(self, queries: Tensor, values: Tensor, value_hw: tuple[int, int], ref: ReferenceGrid) -> Tensor:
        return msda_forward(self, queries, values, value_hw, ref)


def attention_weights(layer: MsdaLayer, queries: Tensor) -> Tensor:
    """Softmaxed sampling weights, shape (B, N, heads, K)."""
    B, N, d = queries.shape
    logits = layer.weight_net(queries.reshape(B * N, d))
    return logits.reshape(B, N, layer.heads, layer.points).softmax(axis=-1)


def sampling_locations(layer: MsdaLayer, queries: Tensor, value_hw: tuple[int, int], ref: ReferenceGrid) -> Tensor:
    """Normalized sampling positions, shape (B, N, heads, K, 2)."""
    B, N, d = queries.shape
    H, W = value_hw
    shape = (B, N, layer.heads, layer.points, 2)
    offsets = layer.offset_net(queries.reshape(B * N, d)).reshape(shape)
    to_unit = np.array([1.0 / max(W - 1, 1), 1.0 / max(H - 1, 1)])
    offsets = T.mul_const(offsets, np.broadcast_to(to_unit, shape))
    return T.add_const(offsets, np.broadcast_to(ref.points[None, :, None, None, :], shape))


def msda_forward(layer: MsdaLayer, queries: Tensor, values: Tensor, value_hw: tuple[int, int],
                 ref: ReferenceGrid) -> Tensor:
    if queries.ndim != 3 or values.ndim != 3:
        raise ValueError(f"msda expects B x N x d inputs, got {queries.shape} and {values.shape}")
    B, N, d = queries.shape
    H, W = value_hw
    if d != layer.d or values.shape[2] != layer.d:
        raise ValueError(f"msda width {layer.d} does not match inputs {queries.shape}, {values.shape}")
    if values.shape[0] != B or values.shape[1] != H * W:
        raise ValueError(f"values {values.shape} do not cover a {H}x{W} map for batch {B}")
    if len(ref) != N:
        raise ValueError(f"reference grid has {len(ref)} points for {N} queries")
    h, K = layer.heads, layer.points
    dh = d // h

    v = layer.value_proj(values.reshape(B * H * W, d))
    v = v.reshape(B, H, W, h, dh).transpose(0, 3, 4, 1, 2).reshape(B * h, dh, H, W)

    loc = sampling_locations(layer, queries, value_hw, ref)
    loc = loc.transpose(0, 2, 1, 3, 4).reshape(B * h, N * K, 2)
    sampled = grid_sample(v, loc).reshape(B, h, dh, N, K)

    attn = attention_weights(layer, queries).transpose(0, 2, 1, 3).reshape(B, h, 1, N, K)
    attn = T.expand(attn, (B, h, dh, N, K))
    heads_out = (sampled * attn).sum(axis=-1)  # (B, h, dh, N)
    merged = heads_out.transpose(0, 3, 1, 2).reshape(B * N, d)
    return layer.output_proj(merged).reshape(B, N, d)


# ---------------------------------------------------------------------------
# scalar-loop reference, independent of the vectorized path above
# ---------------------------------------------------------------------------

def _bilinear_at(plane: np.ndarray, u: float, v: float) -> float:
    H, W = plane.shape
    x = u * (W - 1)
    y = v * (H - 1)
    xl, yl = math.floor(x), math.floor(y)
    total = 0.0
    for yy in (yl, yl + 1):
        for xx in (xl, xl + 1):
            if 0 <= xx < W and 0 <= yy < H:
                wgt = (1 - abs(x - xx)) * (1 - abs(y - yy))
                total += wgt * plane[yy, xx]
    return total


def msda_reference(layer: MsdaLayer, queries: np.ndarray, values: np.ndarray,
                   value_hw: tuple[int, int], ref: ReferenceGrid) -> np.ndarray:
    """Loop-by-loop evaluation of the same attention, for cross-checking."""
    B, N, d = queries.shape
    H, W = value_hw
    h, K = layer.heads, layer.points
    dh = d // h
    p = {name: prm.data.astype(np.float64) for name, prm in layer.named_parameters()}
    out = np.zeros((B, N, d))
    for b in range(B):
        proj = np.zeros((H * W, d))
        for i in range(H * W):
            proj[i] = p["value_proj.weight"] @ values[b, i] + p["value_proj.bias"]
        for n in range(N):
            q = queries[b, n]
            offs = p["offset_net.weight"] @ q + p["offset_net.bias"]
            logits = p["weight_net.weight"] @ q + p["weight_net.bias"]
            merged = np.zeros(d)
            for m in range(h):
                row = logits[m * K:(m + 1) * K]
                ex = [math.exp(z - max(row)) for z in row]
                wsum = sum(ex)
                for k in range(K):
                    ox = offs[(m * K + k) * 2]
                    oy = offs[(m * K + k) * 2 + 1]
                    u = ref.points[n, 0] + ox / (W - 1)
                    v = ref.points[n, 1] + oy / (H - 1)
                    for c in range(dh):
                        plane = proj[:, m * dh + c].reshape(H, W)
                        merged[m * dh + c] += ex[k] / wsum * _bilinear_at(plane, u, v)
            out[b, n] = p["output_proj.weight"] @ merged + p["output_proj.bias"]
    return out
