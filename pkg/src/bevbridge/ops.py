"""Differentiable spatial kernels: convolution, normalization, resizing, sampling.

Coordinate convention shared by ``bilinear_resize`` and ``grid_sample``:
align-corners, i.e. normalized coordinate 0 is the first node and 1 the last.
"""
from __future__ import annotations

import numpy as np
from scipy import sparse

from .tensor import Tensor, _result


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, C, H, W) -> (B*H*W, k*k*C) patches for a same-padded stride-1 kernel.

    Patch columns are ordered (ki, kj, c) so each copy below moves contiguous channel runs.
    """
    B, C, H, W = x.shape
    nhwc = x.transpose(0, 2, 3, 1)
    if k == 1:
        return nhwc.reshape(B * H * W, C)
    pad = k // 2
    xp = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=x.dtype)
    xp[:, pad:pad + H, pad:pad + W] = nhwc
    cols = np.empty((B, H, W, k * k, C), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i * k + j] = xp[:, i:i + H, j:j + W]
    return cols.reshape(B * H * W, k * k * C)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with zero padding k//2 (same-size output)."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects B x C x H x W input, got {x.shape}")
    B, C, H, W = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c_in != C:
        raise ValueError(f"conv2d: input has {C} channels, kernel expects {c_in}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: only odd square kernels supported, got {kh}x{kw}")
    cols = _im2col(x.data, kh)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, H, W, c_out).transpose(0, 3, 1, 2))

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * H * W, c_out)
        gw = (gmat.T @ cols).reshape(c_out, kh, kw, C).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            # input gradient = same-padded correlation of g with the flipped, transposed kernel
            flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(C, -1)
            gcols = gmat if kh == 1 else _im2col(g, kh)
            gx = np.ascontiguousarray((gcols @ flipped.T).reshape(B, H, W, C).transpose(0, 3, 1, 2))
        if bias is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "conv2d")


def _affine_norm(x: Tensor, view: np.ndarray, axes: tuple[int, ...], gamma: Tensor,
                 beta: Tensor, eps: float, op: str) -> Tensor:
    mu = view.mean(axis=axes, keepdims=True)
    centered = view - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv_std).reshape(x.shape)
    cshape = (1, -1, 1, 1)
    out = xhat * gamma.data.reshape(cshape) + beta.data.reshape(cshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            dxhat = (g * gamma.data.reshape(cshape)).reshape(view.shape)
            xh = xhat.reshape(view.shape)
            gx = inv_std * (
                dxhat
                - dxhat.mean(axis=axes, keepdims=True)
                - xh * (dxhat * xh).mean(axis=axes, keepdims=True)
            )
            gx = gx.reshape(x.shape)
        return gx, ggamma, gbeta

    return _result(out.astype(x.dtype), (x, gamma, beta), backward, op)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Statistics per (sample, channel) over the spatial extent."""
    return _affine_norm(x, x.data, (2, 3), gamma, beta, eps, "instance_norm")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Statistics per (sample, channel group)."""
    B, C, H, W = x.shape
    if C % groups:
        raise ValueError(f"group_norm: {C} channels not divisible into {groups} groups")
    view = x.data.reshape(B, groups, C // groups, H, W)
    return _affine_norm(x, view, (2, 3, 4), gamma, beta, eps, "group_norm")


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row r blends source nodes so that output r sits at r*(n_in-1)/(n_out-1)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.clip(np.floor(src).astype(int), 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: target size must be positive, got {(out_h, out_w)}")
    B, C, H, W = x.shape
    ry = interp_matrix(H, out_h, x.dtype)
    rx = interp_matrix(W, out_w, x.dtype)
    out = ry @ (x.data @ rx.T)

    def backward(g):
        return (ry.T @ (g @ rx),)

    return _result(np.ascontiguousarray(out), (x,), backward, "bilinear_resize")


def grid_sample(x: Tensor, points: Tensor) -> Tensor:
    """Bilinearly read ``x`` (B,C,H,W) at normalized ``points`` (B,N,2) -> (B,C,N).

    ``points[..., 0]`` is the column coordinate u, ``points[..., 1]`` the row
    coordinate v. Neighbor nodes that fall off the map read as zero.
    """
    if x.ndim != 4 or points.ndim != 3 or points.shape[2] != 2:
        raise ValueError(f"grid_sample: bad shapes {x.shape} and {points.shape}")
    B, C, H, W = x.shape
    if points.shape[0] != B:
        raise ValueError(f"grid_sample: batch {B} vs points batch {points.shape[0]}")
    N = points.shape[1]
    dt = x.dtype
    # points far outside the map read zero either way; the clip only keeps floor() in int range
    px = np.clip(points.data[..., 0] * (W - 1), -2.0, W + 1.0)
    py = np.clip(points.data[..., 1] * (H - 1), -2.0, H + 1.0)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = (px - x0).astype(dt)
    fy = (py - y0).astype(dt)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    table = x.data.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    base = (np.arange(B, dtype=np.int64) * H * W)[:, None]
    corners = (
        (x0, y0, (1 - fx) * (1 - fy)),
        (x0 + 1, y0, fx * (1 - fy)),
        (x0, y0 + 1, (1 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    )
    flat_idx, weights, values = [], [], []
    out = np.zeros((B, N, C), dtype=dt)
    for cx, cy, w in corners:
        valid = (cx >= 0) & (cx <= W - 1) & (cy >= 0) & (cy <= H - 1)
        idx = base + np.clip(cy, 0, H - 1) * W + np.clip(cx, 0, W - 1)
        v = table[idx] * valid[..., None]
        w = w * valid
        out += w[..., None] * v
        flat_idx.append(idx)
        weights.append(w)
        values.append(v)

    def backward(g):
        gt = g.transpose(0, 2, 1)
        gx = gpts = None
        if x.requires_grad:
            rows = np.tile(np.arange(B * N), 4)
            cols = np.concatenate([i.reshape(-1) for i in flat_idx])
            data = np.concatenate([w.reshape(-1) for w in weights])
            scatter = sparse.csr_matrix((data, (rows, cols)), shape=(B * N, B * H * W))
            gtable = np.asarray(scatter.T @ gt.reshape(B * N, C), dtype=dt)
            gx = np.ascontiguousarray(gtable.reshape(B, H, W, C).transpose(0, 3, 1, 2))
        if points.requires_grad:
            v00, v10, v01, v11 = values
            d_fx = (1 - fy)[..., None] * (v10 - v00) + fy[..., None] * (v11 - v01)
            d_fy = (1 - fx)[..., None] * (v01 - v00) + fx[..., None] * (v11 - v10)
            gpts = np.stack(
                [(gt * d_fx).sum(-1) * (W - 1), (gt * d_fy).sum(-1) * (H - 1)], axis=-1
            ).astype(points.dtype)
        return gx, gpts

    return _result(np.ascontiguousarray(out.transpose(0, 2, 1)), (x, points), backward, "grid_sample")
