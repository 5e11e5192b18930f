import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevbridge import tensor as T
from bevbridge.gradcheck import check_gradients
from bevbridge.losses import (HuwParams, LossBundle, det_loss, dice_loss, heatmap_focal, huw_combine,
                              masked_l1, seg_loss, sigmoid_focal)
from bevbridge.tensor import Tensor


def test_focal_examples(f64):
    t = np.array([1.0, 0.0, 1.0, 0.0])
    assert sigmoid_focal(Tensor(np.where(t == 1, 20.0, -20.0)), t).item() < 1e-6
    assert sigmoid_focal(Tensor([0.0]), [1.0]).item() == pytest.approx(0.25 * 0.5 ** 3 * math.log(2), abs=1e-12)
    with pytest.raises(ValueError):
        sigmoid_focal(Tensor([0.0]), [0.5])


@given(st.lists(st.tuples(st.floats(-8, 8), st.booleans()), min_size=1, max_size=10))
def test_focal_reduces_to_half_bce(pairs):
    x = np.array([p[0] for p in pairs])
    t = np.array([float(p[1]) for p in pairs])
    with T.precision("float64"):
        got = sigmoid_focal(Tensor(x), t, alpha=0.5, gamma=0).item()
    p = 1 / (1 + np.exp(-x))
    bce = -(t * np.log(p) + (1 - t) * np.log(1 - p))
    assert got == pytest.approx(0.5 * bce.mean(), rel=1e-9, abs=1e-12)


def test_dice_examples(f64):
    assert dice_loss(Tensor(np.ones((1, 2, 3))), np.ones((1, 2, 3))).item() == 0
    assert dice_loss(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2, 3))).item() == 0
    p = Tensor(np.array([1.0, 1.0, 0.0, 0.0]))
    assert dice_loss(p, [1.0, 0.0, 1.0, 0.0]).item() == pytest.approx(0.4)


def _heatmap_loop(logits, t):
    total, npos = 0.0, 0
    for x, y in zip(logits.ravel(), t.ravel()):
        p = 1 / (1 + math.exp(-x))
        if y == 1:
            npos += 1
            total += -((1 - p) ** 2) * math.log(p)
        else:
            total += -((1 - y) ** 4) * p ** 2 * math.log(1 - p)
    return total / max(npos, 1)


def test_heatmap_focal_cases(f64, rng):
    assert heatmap_focal(Tensor(np.full((1, 4, 4), -30.0)), np.zeros((1, 4, 4))).item() < 1e-6
    t = np.zeros((1, 4, 4))
    t[0, 1, 1] = 1
    logits = np.where(t == 1, 30.0, -30.0)
    assert heatmap_focal(Tensor(logits), t).item() < 1e-6
    t = rng.uniform(0, 0.9, size=(2, 5, 5))
    t[0, 2, 2] = t[1, 0, 4] = 1
    x = rng.normal(size=t.shape)
    assert heatmap_focal(Tensor(x), t).item() == pytest.approx(_heatmap_loop(x, t), abs=1e-9)


def test_masked_l1_cases(f64):
    pred = Tensor(np.zeros((1, 6, 3, 3)))
    assert masked_l1(pred, np.zeros((1, 6, 3, 3)), np.ones((1, 3, 3))).item() == 0
    assert masked_l1(pred, np.ones((1, 6, 3, 3)), np.zeros((1, 3, 3))).item() == 0
    gt = np.zeros((1, 6, 3, 3))
    gt[0, :, 1, 2] = 0.3
    gt[0, :, 0, 0] = 9.0  # unmasked cells must not count
    mask = np.zeros((1, 3, 3))
    mask[0, 1, 2] = 1
    assert masked_l1(pred, gt, mask).item() == pytest.approx(0.3)


def test_huw_reduction_and_clamp(f64):
    ld, ls = Tensor(np.array(3.0)), Tensor(np.array(5.0))
    assert huw_combine(HuwParams(), ld, ls).item() == 0.5 * (3.0 + 5.0)
    a = huw_combine(HuwParams(1.5, 0.2), ld, ls).item()
    b = huw_combine(HuwParams(2.0, 0.2), ld, ls).item()
    assert a == b
    expected = math.exp(-3) / 2 * 3 + 1.5 + math.exp(-0.4) / 2 * 5 + 0.2
    assert a == pytest.approx(expected, rel=1e-12)


def test_huw_gradient_formula(f64):
    for s in (0.3, -0.7, 1.2):
        params = HuwParams(s, 0.0)
        ld, ls = Tensor(np.array(2.5), requires_grad=True), Tensor(np.array(4.0), requires_grad=True)
        huw_combine(params, ld, ls).backward()
        analytic = -math.exp(-2 * s) * 2.5 + 1
        assert params.log_sigma_det.grad[0] == pytest.approx(analytic, rel=1e-12)
        assert ld.grad == pytest.approx(math.exp(-2 * s) / 2)
        rng = np.random.default_rng(0)
        worst, _ = check_gradients(lambda: huw_combine(params, ld, ls),
                                   {"log_sigma_det": params.log_sigma_det}, rng)
        assert worst < 1e-5
    clamped = HuwParams(2.0, 0.0)
    huw_combine(clamped, Tensor(np.array(1.0)), Tensor(np.array(1.0))).backward()
    assert clamped.log_sigma_det.grad[0] == 0


def test_huw_rejects_non_finite():
    with pytest.raises(ValueError, match="l_seg"):
        huw_combine(HuwParams(), Tensor(np.array(1.0)), Tensor(np.array(np.nan)))


@given(st.floats(0.01, 50), st.floats(-1, 1.4))
@settings(max_examples=30)
def test_huw_optimum_at_sigma_squared_equal_loss(loss, s0):
    with T.precision("float64"):
        s = 0.5 * math.log(loss)
        if s > 1.5:
            return
        p = HuwParams(s, s0)
        huw_combine(p, Tensor(np.array(loss)), Tensor(np.array(1.0))).backward()
    assert abs(p.log_sigma_det.grad[0]) < 1e-9


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 5), st.floats(-2, 1.5), st.floats(-2, 1.5))
def test_huw_monotone(l1, l2, bump, sd, ss):
    with T.precision("float64"):
        p = HuwParams(sd, ss)
        base = huw_combine(p, Tensor(np.array(l1)), Tensor(np.array(l2))).item()
        up = huw_combine(p, Tensor(np.array(l1 + bump)), Tensor(np.array(l2))).item()
    assert up >= base


def test_seg_and_det_assembly(f64, rng):
    logits = Tensor(rng.normal(size=(2, 3, 4, 4)))
    t = (rng.uniform(size=(2, 3, 4, 4)) > 0.5).astype(float)
    total, focal, dice = seg_loss(logits, t)
    assert total.item() == pytest.approx(20 * focal.item() + 20 * dice.item(), rel=1e-12)
    hm_gt = np.zeros((2, 1, 4, 4))
    hm_gt[0, 0, 1, 1] = 1
    mask = np.zeros((2, 4, 4))
    mask[0, 1, 1] = 1
    d_total, hm, l1 = det_loss(Tensor(rng.normal(size=(2, 1, 4, 4))), Tensor(rng.normal(size=(2, 6, 4, 4))),
                               hm_gt, np.zeros((2, 6, 4, 4)), mask)
    assert d_total.item() == pytest.approx(hm.item() + l1.item())
    assert min(focal.item(), dice.item(), hm.item(), l1.item()) >= 0


def test_loss_bundle_row():
    b = LossBundle(1, 2, 3, 4, 5, 6, 7, 1.0, 1.0)
    assert b.is_finite()
    assert b.csv_row(3, 1e-4)[:2] == [3, "0.0001"]
    assert not LossBundle(1, 2, 3, 4, 5, 6, float("nan"), 1.0, 1.0).is_finite()
