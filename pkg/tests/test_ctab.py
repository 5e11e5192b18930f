import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevbridge import tensor as T
from bevbridge.ctab import GATE_INIT, CtabModule, GateLog, GateState, read_gate_csv, read_gates
from bevbridge.gradcheck import check_gradients, projected
from bevbridge.tensor import Tensor


def _module(rng, det=16, seg=8):
    return CtabModule(det, seg, 16, 4, 2, rng)


def _inputs(rng, b=1, h=4, w=5, det=16, seg=8):
    return Tensor(rng.normal(size=(b, det, h, w))), Tensor(rng.normal(size=(b, seg, h, w)))


def test_fresh_gates(rng):
    m = _module(rng)
    assert m.g_det.item() == GATE_INIT == -2.0 and m.g_seg.item() == -2.0
    g = read_gates(m, 0)
    assert abs(g.sigma_g_det - 0.11920) < 1e-5 and abs(g.sigma_g_seg - 0.11920) < 1e-5


def test_shapes_preserved(f64, rng):
    m = _module(rng)
    fd, fs = _inputs(rng, b=2, h=3, w=2)
    od, os_ = m(fd, fs)
    assert od.shape == fd.shape and os_.shape == fs.shape


def test_closed_gates_give_identity(f64, rng):
    m = _module(rng)
    m.g_det.data[:] = -1e6
    m.g_seg.data[:] = -1e6
    fd, fs = _inputs(rng)
    od, os_ = m(fd, fs)
    assert np.abs(od.data - fd.data).max() < 1e-6 and np.abs(os_.data - fs.data).max() < 1e-6


def test_fresh_contribution_is_scaled_by_gate(f64, rng):
    m = _module(rng)
    fd, fs = _inputs(rng)
    od0, os0 = m(fd, fs)
    m.g_det.data[:] = 50.0
    m.g_seg.data[:] = 50.0
    od1, os1 = m(fd, fs)
    sig = 1 / (1 + np.exp(2.0))
    assert np.allclose(od0.data - fd.data, sig * (od1.data - fd.data), atol=1e-12)
    assert np.allclose(os0.data - fs.data, sig * (os1.data - fs.data), atol=1e-12)
    rel = np.linalg.norm(od0.data - fd.data) / np.linalg.norm(fd.data)
    assert 0 < rel < 1


def test_order_independence_is_bitwise(f64, rng):
    m = _module(rng)
    fd, fs = _inputs(rng)
    a = m(fd, fs, order="s2d-first")
    b = m(fd, fs, order="d2s-first")
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)
    with pytest.raises(ValueError):
        m(fd, fs, order="sideways")


def test_swapping_value_streams_changes_outputs(f64, rng):
    m = _module(rng, det=8, seg=8)
    m.g_det.data[:] = 0.0
    m.g_seg.data[:] = 0.0
    fd, fs = _inputs(rng, det=8, seg=8)
    od, os_ = m(fd, fs)
    # feed the d2s layer into the s2d slot and vice versa
    m.msda_s2d, m.msda_d2s = m.msda_d2s, m.msda_s2d
    sd, ss = m(fd, fs)
    assert np.abs(od.data - sd.data).max() > 1e-6 and np.abs(os_.data - ss.data).max() > 1e-6


def test_gates_receive_gradient(f64, rng):
    m = _module(rng)
    fd, fs = _inputs(rng)
    od, os_ = m(fd, fs)
    ((od * od).sum() + (os_ * os_).sum()).backward()
    assert m.g_det.grad[0] != 0 and m.g_seg.grad[0] != 0
    rng2 = np.random.default_rng(3)
    both = lambda: T.concat([o.reshape(-1) for o in m(fd, fs)], 0)  # noqa: E731
    worst, _ = check_gradients(projected(both, rng2), {"g_det": m.g_det, "g_seg": m.g_seg}, rng2)
    assert worst < 1e-4


def test_shape_mismatch_rejected(rng):
    m = _module(rng)
    with pytest.raises(ValueError):
        m(Tensor(np.zeros((1, 16, 4, 4))), Tensor(np.zeros((1, 8, 4, 5))))
    with pytest.raises(ValueError):
        m(Tensor(np.zeros((16, 4, 4))), Tensor(np.zeros((1, 8, 4, 4))))


def test_gate_log_round_trip(tmp_path):
    path = tmp_path / "gates.csv"
    with open(path, "w", newline="") as fh:
        log = GateLog(fh)
        log.append(GateState(0, 0.1192, 0.1192))
        log.append(GateState(5, 0.125, 0.13))
    rows = read_gate_csv(path)
    assert rows == [GateState(0, 0.1192, 0.1192), GateState(5, 0.125, 0.13)]
    assert path.read_text().splitlines()[0] == "step,sigma_g_det,sigma_g_seg"
    with pytest.raises(ValueError):
        GateState(-1, 0.5, 0.5)


@given(st.floats(-30, 30), st.floats(-30, 30))
@settings(max_examples=30)
def test_gate_values_in_open_interval(a, b):
    m = CtabModule(8, 8, 8, 2, 1, np.random.default_rng(0))
    m.g_det.data[:] = a
    m.g_seg.data[:] = b
    g = m.read_gates(3)
    assert 0 < g.sigma_g_det < 1 and 0 < g.sigma_g_seg < 1
