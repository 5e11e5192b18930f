import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevbridge import tensor as T
from bevbridge.msda import (MsdaLayer, attention_weights, initial_offsets, make_reference_grid,
                            msda_forward, msda_reference, sampling_locations)
from bevbridge.tensor import Tensor


def test_reference_grid_examples():
    g = make_reference_grid(2, 2)
    assert g.points.tolist() == [[0, 0], [1, 0], [0, 1], [1, 1]]
    assert make_reference_grid(3, 3).points[4].tolist() == [0.5, 0.5]
    assert np.allclose(make_reference_grid(2, 3).points[:3, 0], [0, 0.5, 1])
    with pytest.raises(ValueError):
        make_reference_grid(1, 4)


@given(st.integers(2, 9), st.integers(2, 9))
def test_reference_grid_layout(h, w):
    g = make_reference_grid(h, w)
    assert len(g) == h * w
    i, j = np.random.default_rng(h * w).integers(0, h), np.random.default_rng(h + w).integers(0, w)
    assert np.allclose(g.points[i * w + j], [j / (w - 1), i / (h - 1)])
    assert g.points.min() == 0 and g.points.max() == 1


def _identity_layer(d, heads, points):
    layer = MsdaLayer(d, heads, points, np.random.default_rng(0))
    for lin in (layer.value_proj, layer.output_proj):
        lin.weight.data = np.eye(d)
        lin.bias.data = np.zeros(d)
    layer.offset_net.bias.data = np.zeros_like(layer.offset_net.bias.data)
    return layer


def test_identity_projections_reproduce_values(f64, rng):
    H, W, d = 3, 4, 8
    layer = _identity_layer(d, 2, 3)
    values = rng.normal(size=(2, H * W, d))
    out = msda_forward(layer, Tensor(rng.normal(size=(2, H * W, d))), Tensor(values), (H, W),
                       make_reference_grid(H, W))
    assert np.allclose(out.data, values, atol=1e-12)


def test_initial_state_is_uniform_attention(f64, rng):
    layer = MsdaLayer(8, 2, 4, rng)
    q = Tensor(rng.normal(size=(1, 6, 8)))
    assert np.allclose(attention_weights(layer, q).data, 0.25)
    offs = initial_offsets(2, 4)
    assert np.allclose(np.linalg.norm(offs, axis=-1), [[0.25, 0.5, 0.75, 1.0]] * 2)
    # head directions are evenly spaced
    assert np.allclose(offs[1, -1], [-1, 0], atol=1e-12)


def test_offsets_are_in_cell_units(f64, rng):
    layer = MsdaLayer(4, 1, 1, rng)
    layer.offset_net.bias.data = np.array([1.0, 2.0])
    ref = make_reference_grid(5, 3)
    loc = sampling_locations(layer, Tensor(np.zeros((1, 15, 4))), (5, 3), ref).data
    assert np.allclose(loc[0, :, 0, 0] - ref.points, [1 / 2, 2 / 4])


@given(st.integers(0, 10_000))
@settings(max_examples=25)
def test_attention_weights_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    with T.precision("float64"):
        layer = MsdaLayer(8, 2, 3, rng)
        layer.weight_net.weight.data = rng.normal(size=layer.weight_net.weight.shape) * 3
        w = attention_weights(layer, Tensor(rng.normal(size=(2, 5, 8)))).data
    assert np.allclose(w.sum(-1), 1, atol=1e-6)


@given(st.integers(0, 10_000), st.integers(2, 6), st.integers(2, 6))
@settings(max_examples=30)
def test_fast_path_matches_loop_reference(seed, H, W):
    rng = np.random.default_rng(seed)
    with T.precision("float64"):
        layer = MsdaLayer(8, 2, 2, rng)
        layer.offset_net.weight.data = rng.normal(scale=0.5, size=layer.offset_net.weight.shape)
        layer.weight_net.weight.data = rng.normal(size=layer.weight_net.weight.shape)
        q, v = rng.normal(size=(1, H * W, 8)), rng.normal(size=(1, H * W, 8))
        ref = make_reference_grid(H, W)
        fast = msda_forward(layer, Tensor(q), Tensor(v), (H, W), ref).data
    assert np.abs(fast - msda_reference(layer, q, v, (H, W), ref)).max() < 1e-6


def test_far_offsets_read_zero(f64, rng):
    layer = _identity_layer(4, 1, 1)
    layer.offset_net.bias.data = np.array([100.0, 100.0])
    out = msda_forward(layer, Tensor(rng.normal(size=(1, 4, 4))), Tensor(rng.normal(size=(1, 4, 4))), (2, 2),
                       make_reference_grid(2, 2))
    assert np.array_equal(out.data, np.zeros((1, 4, 4)))


def test_shape_contract(rng):
    layer = MsdaLayer(8, 2, 2, rng)
    ref = make_reference_grid(2, 3)
    with pytest.raises(ValueError):
        msda_forward(layer, Tensor(np.zeros((1, 6, 8))), Tensor(np.zeros((1, 5, 8))), (2, 3), ref)
    with pytest.raises(ValueError):
        msda_forward(layer, Tensor(np.zeros((1, 4, 8))), Tensor(np.zeros((1, 6, 8))), (2, 3), ref)
    with pytest.raises(ValueError):
        MsdaLayer(10, 3, 2, rng)
    with pytest.raises(ValueError):
        MsdaLayer(8, 2, 2, rng, levels=2)


def test_linear_sizes(rng):
    layer = MsdaLayer(16, 4, 3, rng)
    assert layer.offset_net.weight.shape[0] == 2 * 4 * 3
    assert layer.weight_net.weight.shape[0] == 4 * 3
