import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.ndimage import map_coordinates
from scipy.signal import correlate

from bevbridge import ops
from bevbridge import tensor as T
from bevbridge.layers import Conv2d, ConvNormAct, GroupNorm, InstanceNorm, Linear, Module, Norm
from bevbridge.tensor import Parameter, Tensor


def test_conv_1x1_identity(f64, rng):
    x = Tensor(rng.normal(size=(2, 4, 3, 5)))
    w = Tensor(np.eye(4).reshape(4, 4, 1, 1))
    assert np.array_equal(ops.conv2d(x, w, Tensor(np.zeros(4))).data, x.data)


def test_conv_ones_kernel_hand_values(f64):
    out = ops.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3)))).data[0, 0]
    assert out[2, 2] == 9 and out[0, 0] == 4 and out[0, 2] == 6


def test_conv_matches_scipy_correlate(f64, rng):
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    for n in range(2):
        for o in range(4):
            ref = sum(correlate(x[n, c], w[o, c], mode="same") for c in range(3)) + b[o]
            assert np.allclose(got[n, o], ref, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        Conv2d(3, 4, 3, np.random.default_rng(0))(Tensor(np.ones((1, 2, 4, 4))))


@given(st.integers(1, 3), st.integers(1, 4), st.integers(2, 6), st.integers(2, 6))
def test_instance_norm_statistics(b, c, h, w):
    rng = np.random.default_rng(b * 100 + c * 10 + h + w)
    with T.precision("float64"):
        x = Tensor(rng.normal(2.0, 3.0, size=(b, c, h, w)))
        y = InstanceNorm(c)(x).data
    assert np.allclose(y.mean(axis=(2, 3)), 0, atol=1e-6)
    v = x.data.var(axis=(2, 3))
    assert np.allclose(y.var(axis=(2, 3)), v / (v + 1e-5), atol=1e-9)


def test_constant_channel_gives_beta(f64):
    norm = InstanceNorm(2)
    norm.beta.data = np.array([0.5, -1.0])
    y = norm(Tensor(np.full((1, 2, 3, 3), 4.0))).data
    assert np.all(np.isfinite(y))
    assert np.allclose(y[0, 0], 0.5) and np.allclose(y[0, 1], -1.0)


def test_group_norm_with_one_channel_per_group_is_instance_norm(f64, rng):
    x = Tensor(rng.normal(size=(2, 8, 4, 3)))
    g, b = Tensor(rng.normal(size=8)), Tensor(rng.normal(size=8))
    assert np.array_equal(ops.group_norm(x, 8, g, b).data, ops.instance_norm(x, g, b).data)


def test_group_norm_matches_numpy(f64, rng):
    x = rng.normal(size=(2, 8, 3, 3))
    y = GroupNorm(8, groups=4)(Tensor(x)).data
    xg = x.reshape(2, 4, 2, 3, 3)
    ref = (xg - xg.mean(axis=(2, 3, 4), keepdims=True)) / np.sqrt(xg.var(axis=(2, 3, 4), keepdims=True) + 1e-5)
    assert np.allclose(y, ref.reshape(x.shape), atol=1e-12)


def test_group_norm_requires_divisible_channels():
    with pytest.raises(ValueError):
        Norm(12, "group", groups=8)


def test_bilinear_resize_cases(f64):
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = ops.bilinear_resize(x, 3, 3).data[0, 0]
    assert out[1, 1] == pytest.approx(2.5)
    assert np.allclose(out[0], [1, 1.5, 2])
    assert np.array_equal(ops.bilinear_resize(x, 2, 2).data, x.data)
    const = ops.bilinear_resize(Tensor(np.full((1, 2, 4, 5), 7.0)), 9, 3).data
    assert np.allclose(const, 7)


def test_bilinear_resize_matches_map_coordinates(f64, rng):
    x = rng.normal(size=(5, 7))
    out = ops.bilinear_resize(Tensor(x[None, None]), 8, 11).data[0, 0]
    rows = np.linspace(0, 4, 8)
    cols = np.linspace(0, 6, 11)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    ref = map_coordinates(x, [rr, cc], order=1)
    assert np.allclose(out, ref, atol=1e-12)


def test_grid_sample_cases(f64):
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    pts = Tensor(np.array([[[0.0, 0.0], [0.5, 0.5], [2.0, 2.0], [1.0, 0.0]]]))
    out = ops.grid_sample(x, pts).data[0, 0]
    assert out[0] == 1.0
    assert out[1] == pytest.approx(2.5)
    assert out[2] == 0.0
    assert out[3] == 2.0


def test_grid_sample_matches_zero_padded_oracle(f64, rng):
    # per-corner zero padding is exactly scipy's grid-constant mode
    x = rng.normal(size=(4, 6))
    pts = rng.uniform(-0.4, 1.4, size=(50, 2))
    out = ops.grid_sample(Tensor(x[None, None]), Tensor(pts[None])).data[0, 0]
    ref = map_coordinates(x, [pts[:, 1] * 3, pts[:, 0] * 5], order=1, mode="grid-constant", cval=0.0)
    assert np.allclose(out, ref, atol=1e-12)


@given(st.floats(0, 1), st.floats(0, 1))
def test_grid_sample_is_convex_combination(u, v):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 4))
    with T.precision("float64"):
        val = ops.grid_sample(Tensor(x[None, None]), Tensor(np.array([[[u, v]]]))).data.item()
    col, row = u * 3, v * 2
    c0, r0 = min(int(col), 2), min(int(row), 1)
    nb = x[r0:r0 + 2, c0:c0 + 2]
    assert nb.min() - 1e-12 <= val <= nb.max() + 1e-12


def test_resize_then_sample_at_nodes(f64, rng):
    x = rng.normal(size=(1, 2, 4, 5))
    up = ops.bilinear_resize(Tensor(x), 7, 9)
    jj, ii = np.meshgrid(np.arange(5) / 4, np.arange(4) / 3)
    pts = np.stack([jj.ravel(), ii.ravel()], axis=1)[None]
    back = ops.grid_sample(up, Tensor(pts)).data.reshape(1, 2, 4, 5)
    assert np.allclose(back, x, atol=1e-5)


class _Two(Module):
    def __init__(self, rng):
        self.first = Linear(3, 4, rng)
        self.blocks = [ConvNormAct(2, 8, 3, rng, norm="group")]
        self.extra = Parameter(np.zeros(2), decay=False)


def test_parameter_discovery_and_state_dict(rng):
    m = _Two(rng)
    names = [n for n, _ in m.named_parameters()]
    assert names == ["first.weight", "first.bias", "blocks.0.conv.weight", "blocks.0.conv.bias",
                     "blocks.0.norm.gamma", "blocks.0.norm.beta", "extra"]
    state = m.state_dict()
    other = _Two(np.random.default_rng(99))
    other.load_state_dict(state)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(m.parameters(), other.parameters()))
    state["extra"] = np.zeros(3)
    with pytest.raises(ValueError):
        other.load_state_dict(state)
    with pytest.raises(KeyError):
        other.load_state_dict({})


def test_decay_flags(rng):
    conv = Conv2d(2, 3, 3, rng)
    norm = InstanceNorm(3)
    assert conv.weight.decay and not conv.bias.decay
    assert not norm.gamma.decay and not norm.beta.decay
