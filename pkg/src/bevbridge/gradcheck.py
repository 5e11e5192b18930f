"""Finite-difference gradient checks at float64, grouped by the module they exercise.

Each case builds a scalar loss as a fixed random projection of an op's output,
so no gradient can cancel by symmetry. Analytic gradients are compared with
central differences on a random subset of coordinates per input tensor.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from . import tensor as T
from .tensor import Tensor

EPS = 1e-5
TOL_SMOOTH = 1e-4
TOL_KINKED = 1e-3


@dataclass(frozen=True)
class GradResult:
    module: str
    name: str
    worst: float
    tolerance: float
    worst_tensor: str

    @property
    def passed(self) -> bool:
        return bool(self.worst < self.tolerance)


@dataclass(frozen=True)
class Case:
    module: str
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[[], Tensor], dict[str, Tensor]]]
    smooth: bool = True


NOISE_FLOOR = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = NOISE_FLOOR) -> float:
    """||a - n|| / max(||a||, ||n||, floor).

    The floor keeps structurally zero gradients (a conv bias feeding a norm layer)
    from turning finite-difference round-off into a relative error of 1.
    """
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(loss_fn: Callable[[], Tensor], inputs: dict[str, Tensor], rng: np.random.Generator,
                    samples: int = 20, eps: float = EPS) -> tuple[float, str]:
    """Worst relative error over ``inputs`` and the name of the tensor it came from."""
    for t in inputs.values():
        t.grad = None
    loss = loss_fn()
    loss.backward()
    worst, worst_name = 0.0, ""
    for name, t in inputs.items():
        if t.grad is None:
            raise AssertionError(f"{name}: no gradient reached this input")
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        numeric = np.empty(len(picks))
        for n, i in enumerate(picks):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            numeric[n] = (up - down) / (2 * eps)
        err = relative_error(t.grad.reshape(-1)[picks], numeric)
        if err >= worst:
            worst, worst_name = err, name
    return worst, worst_name


def projected(out_fn: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    """Scalar loss sum(out * R) with R drawn once."""
    proj: dict[str, np.ndarray] = {}

    def loss():
        out = out_fn()
        if "r" not in proj:
            proj["r"] = rng.normal(size=out.shape)
        return T.mul_const(out, proj["r"]).sum()

    return loss


def leaf(rng: np.random.Generator, *shape, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def module_inputs(module, prefix: str = "") -> dict[str, Tensor]:
    return {prefix + name: p for name, p in module.named_parameters()}


def jitter(module, rng: np.random.Generator, scale: float = 0.1) -> None:
    """Perturb every parameter so zero-initialized heads and exact kinks do not hide bugs."""
    for p in module.parameters():
        p.data = p.data + rng.normal(0.0, scale, size=p.shape)


# ---------------------------------------------------------------------------
# case registry
# ---------------------------------------------------------------------------

CASES: list[Case] = []


def case(module: str, name: str, smooth: bool = True):
    def register(build):
        CASES.append(Case(module, name, build, smooth))
        return build
    return register


def _unary(fn, low=-1.0, high=1.0):
    def build(rng):
        x = leaf(rng, 3, 4, low=low, high=high)
        return projected(lambda: fn(x), rng), {"x": x}
    return build


for _name, _fn, _lo, _hi, _smooth in [
    ("sigmoid", T.sigmoid, -3, 3, True),
    ("exp", T.exp, -2, 2, True),
    ("log", T.log, 0.2, 3, True),
    ("softplus", T.softplus, -3, 3, True),
    ("pow", lambda x: T.pow(x, 2.5), 0.2, 2, True),
    ("softmax", lambda x: T.softmax(x, axis=-1), -2, 2, True),
    ("relu", T.relu, -1, 1, False),
    ("abs", T.abs, -1, 1, False),
    ("clamp_max", lambda x: T.clamp_max(x, 0.3), -1, 1, False),
]:
    case("tensor-core", _name, _smooth)(_unary(_fn, _lo, _hi))


@case("tensor-core", "add_mul_broadcast")
def _add_mul(rng):
    a, b, s = leaf(rng, 3, 4), leaf(rng, 3, 4), leaf(rng, 1)
    return projected(lambda: (a * b + s) * s - b / T.add_const(T.abs(a), 1.0), rng), {"a": a, "b": b, "s": s}


@case("tensor-core", "matmul_linear")
def _matmul(rng):
    a, b = leaf(rng, 3, 5), leaf(rng, 5, 4)
    w, bias = leaf(rng, 2, 4), leaf(rng, 2)
    return projected(lambda: T.linear(a @ b, w, bias), rng), {"a": a, "b": b, "w": w, "bias": bias}


@case("tensor-core", "reductions_shapes")
def _shapes(rng):
    x = leaf(rng, 2, 3, 4)
    y = leaf(rng, 2, 3, 1)

    def out():
        z = T.concat([x.transpose(0, 2, 1), T.expand(y, (2, 3, 4)).transpose(0, 2, 1)], axis=1)
        col = T.expand(z.mean(axis=(0, 1), keepdims=True).reshape(1, 3), (2, 3))
        return z.sum(axis=1) * col + x[:, 1, ::2].sum()

    return projected(out, rng), {"x": x, "y": y}


@case("tensor-core", "getitem_scatter")
def _getitem(rng):
    x = leaf(rng, 5, 3)
    idx = np.array([0, 2, 2, 4])
    return projected(lambda: x[idx] * x[idx], rng), {"x": x}


@case("nn-layers", "conv2d_3x3")
def _conv3(rng):
    x, w, b = leaf(rng, 2, 3, 5, 4), leaf(rng, 4, 3, 3, 3), leaf(rng, 4)
    return projected(lambda: ops.conv2d(x, w, b), rng), {"x": x, "weight": w, "bias": b}


@case("nn-layers", "conv2d_1x1")
def _conv1(rng):
    x, w, b = leaf(rng, 2, 3, 4, 4), leaf(rng, 5, 3, 1, 1), leaf(rng, 5)
    return projected(lambda: ops.conv2d(x, w, b), rng), {"x": x, "weight": w, "bias": b}


@case("nn-layers", "instance_norm")
def _in(rng):
    x, g, b = leaf(rng, 2, 3, 4, 5), leaf(rng, 3, low=0.5, high=1.5), leaf(rng, 3)
    return projected(lambda: ops.instance_norm(x, g, b), rng), {"x": x, "gamma": g, "beta": b}


@case("nn-layers", "group_norm")
def _gn(rng):
    x, g, b = leaf(rng, 2, 8, 3, 3), leaf(rng, 8, low=0.5, high=1.5), leaf(rng, 8)
    return projected(lambda: ops.group_norm(x, 4, g, b), rng), {"x": x, "gamma": g, "beta": b}


@case("nn-layers", "bilinear_resize")
def _resize(rng):
    x = leaf(rng, 2, 3, 4, 5)
    return projected(lambda: ops.bilinear_resize(x, 6, 8), rng), {"x": x}


@case("nn-layers", "grid_sample", smooth=False)
def _grid(rng):
    x = leaf(rng, 2, 3, 4, 5)
    # keep points away from cell borders so the difference stencil stays on one bilinear patch
    pts = rng.uniform(-0.2, 1.2, size=(2, 7, 2))
    pts[..., 0] = (np.floor(pts[..., 0] * 4) + rng.uniform(0.1, 0.9, size=(2, 7))) / 4
    pts[..., 1] = (np.floor(pts[..., 1] * 3) + rng.uniform(0.1, 0.9, size=(2, 7))) / 3
    p = Tensor(pts, requires_grad=True)
    return projected(lambda: ops.grid_sample(x, p), rng), {"x": x, "points": p}


@case("nn-layers", "conv_norm_act", smooth=False)
def _cna(rng):
    from .layers import ConvNormAct
    m = ConvNormAct(3, 8, 3, rng, norm="group")
    jitter(m, rng)
    x = leaf(rng, 2, 3, 4, 4)
    return projected(lambda: m(x), rng), {"x": x, **module_inputs(m)}


@case("nn-layers", "linear")
def _lin(rng):
    from .layers import Linear
    m = Linear(4, 3, rng)
    x = leaf(rng, 5, 4)
    return projected(lambda: m(x), rng), {"x": x, **module_inputs(m)}


def _msda_setup(rng, H=3, W=4, d=8, heads=2, points=3):
    from .msda import MsdaLayer, make_reference_grid
    layer = MsdaLayer(d, heads, points, rng)
    jitter(layer, rng, 0.3)
    q, v = leaf(rng, 2, H * W, d), leaf(rng, 2, H * W, d)
    return layer, q, v, (H, W), make_reference_grid(H, W)


@case("msda", "msda_forward", smooth=False)
def _msda(rng):
    from .msda import msda_forward
    layer, q, v, hw, ref = _msda_setup(rng)
    return projected(lambda: msda_forward(layer, q, v, hw, ref), rng), {"queries": q, "values": v, **module_inputs(layer)}


@case("msda", "sampling_offsets", smooth=False)
def _msda_offsets(rng):
    from .msda import msda_forward
    layer, q, v, hw, ref = _msda_setup(rng)
    return (projected(lambda: msda_forward(layer, q, v, hw, ref), rng),
            {"offset_net.weight": layer.offset_net.weight, "offset_net.bias": layer.offset_net.bias})


@case("ctab", "ctab_forward", smooth=False)
def _ctab(rng):
    from .ctab import CtabModule
    m = CtabModule(8, 16, 8, 2, 2, rng, gate_init=-0.5)
    jitter(m, rng, 0.2)
    fd, fs = leaf(rng, 2, 8, 3, 3), leaf(rng, 2, 16, 3, 3)

    def out():
        a, b = m(fd, fs)
        return T.concat([a, b], axis=1)

    return projected(out, rng), {"f_det": fd, "f_seg": fs, **module_inputs(m)}


@case("ctab", "gates")
def _gates(rng):
    from .ctab import CtabModule
    m = CtabModule(8, 8, 8, 2, 2, rng)
    jitter(m, rng, 0.2)
    fd, fs = leaf(rng, 1, 8, 2, 3), leaf(rng, 1, 8, 2, 3)

    def out():
        a, b = m(fd, fs)
        return a + b

    return projected(out, rng), {"g_det": m.g_det, "g_seg": m.g_seg}


@case("seg-branch", "decoder", smooth=False)
def _decoder(rng):
    from .seg import SegDecoder
    m = SegDecoder(4, 3, rng, width=8, num_blocks=2)
    jitter(m, rng)
    x = leaf(rng, 1, 4, 4, 4)

    def out():
        f, logits = m.decode(x)
        return T.concat([f.sum(axis=1, keepdims=True), logits], axis=1)

    return projected(out, rng), {"x": x, **module_inputs(m)}


@case("seg-branch", "upsampler", smooth=False)
def _upsampler(rng):
    from .seg import BevUpsampler
    m = BevUpsampler(4, rng)
    jitter(m, rng)
    x = leaf(rng, 1, 4, 4, 4)
    return projected(lambda: m(x), rng), {"x": x, **module_inputs(m)}


@case("det-branch", "det_head", smooth=False)
def _det(rng):
    from .det import DetHead
    m = DetHead(8, 2, rng, hidden=8)
    jitter(m, rng)
    x = leaf(rng, 2, 8, 4, 4)

    def out():
        hm, reg = m(x)
        return T.concat([hm, reg], axis=1)

    return projected(out, rng), {"x": x, **module_inputs(m)}


@case("losses", "sigmoid_focal")
def _focal(rng):
    from .losses import sigmoid_focal
    x = leaf(rng, 2, 3, 4, low=-3, high=3)
    t = (rng.random((2, 3, 4)) < 0.4).astype(float)
    return (lambda: sigmoid_focal(x, t)), {"logits": x}


@case("losses", "dice")
def _dice(rng):
    from .losses import dice_loss
    x = leaf(rng, 2, 3, 4, 4, low=-3, high=3)
    t = (rng.random(x.shape) < 0.4).astype(float)
    return (lambda: dice_loss(T.sigmoid(x), t)), {"logits": x}


@case("losses", "heatmap_focal")
def _hm(rng):
    from .det import draw_gaussian
    from .losses import heatmap_focal
    x = leaf(rng, 2, 1, 8, 8, low=-3, high=3)
    gt = np.zeros(x.shape)
    draw_gaussian(gt[0, 0], 3, 4, 2)
    draw_gaussian(gt[1, 0], 6, 1, 2)
    return (lambda: heatmap_focal(x, gt)), {"logits": x}


@case("losses", "masked_l1", smooth=False)
def _l1(rng):
    from .losses import masked_l1
    x = leaf(rng, 2, 6, 4, 4)
    gt = rng.uniform(-1, 1, size=x.shape)
    mask = (rng.random((2, 4, 4)) < 0.3).astype(float)
    mask[0, 0, 0] = 1
    return (lambda: masked_l1(x, gt, mask)), {"reg": x}


@case("losses", "huw_combine")
def _huw(rng):
    from .losses import HuwParams, huw_combine
    params = HuwParams(rng.uniform(-1, 1), rng.uniform(-1, 1))
    l_det, l_seg = leaf(rng, 1, low=0.5, high=2), leaf(rng, 1, low=0.5, high=2)
    return (lambda: huw_combine(params, l_det, l_seg)), {
        "l_det": l_det, "l_seg": l_seg,
        "log_sigma_det": params.log_sigma_det, "log_sigma_seg": params.log_sigma_seg,
    }


@case("synth-data", "toy_encoder", smooth=False)
def _encoder(rng):
    from .model import ToyEncoder
    m = ToyEncoder(6, (8,), 8, rng)
    jitter(m, rng)
    x = leaf(rng, 1, 6, 4, 4)
    return projected(lambda: m(x), rng), {"x": x, **module_inputs(m)}


def module_names() -> list[str]:
    return sorted({c.module for c in CASES})


def run_suite(scope: str = "all", seed: int = 0, samples: int = 20,
              cases: Sequence[Case] | None = None) -> list[GradResult]:
    cases = CASES if cases is None else cases
    if scope != "all" and scope not in {c.module for c in cases}:
        raise KeyError(scope)
    results = []
    with T.precision("float64"):
        for i, c in enumerate(cases):
            if scope != "all" and c.module != scope:
                continue
            rng = np.random.default_rng([seed, i])
            loss_fn, inputs = c.build(rng)
            worst, where = check_gradients(loss_fn, inputs, rng, samples)
            tol = TOL_SMOOTH if c.smooth else TOL_KINKED
            results.append(GradResult(c.module, c.name, worst, tol, where))
    return results


def format_table(results: Sequence[GradResult]) -> str:
    lines = [f"{'module':<12} {'op':<20} {'worst rel err':>14} {'tol':>8}  status  worst input"]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.module:<12} {r.name:<20} {r.worst:>14.3e} {r.tolerance:>8.0e}  {status:<6}  {r.worst_tensor}")
    return "\n".join(lines)
