"""Module base class and the layer vocabulary shared by every branch."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Parameter, Tensor, get_dtype, linear, relu

GN_GROUPS = 8
NORM_EPS = 1e-5


class Module:
    """Parameters are discovered from attributes, lists and sub-modules, in definition order."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def _walk(value, name: str):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


def uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(get_dtype())


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, bias: bool = True):
        if kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {kernel}")
        fan_in = c_in * kernel * kernel
        self.weight = Parameter(uniform(rng, (c_out, c_in, kernel, kernel), np.sqrt(6.0 / fan_in)))
        self.bias = Parameter(np.zeros(c_out), decay=False) if bias else None

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias)


class Norm(Module):
    """Instance or group normalization; neither keeps running statistics."""

    def __init__(self, channels: int, kind: str = "instance", groups: int = GN_GROUPS, eps: float = NORM_EPS):
        if kind not in ("instance", "group"):
            raise ValueError(f"unknown norm kind {kind!r}")
        if kind == "group" and channels % groups:
            raise ValueError(f"{channels} channels not divisible into {groups} groups")
        self.kind = kind
        self.groups = groups if kind == "group" else channels
        self.eps = eps
        self.gamma = Parameter(np.ones(channels), decay=False)
        self.beta = Parameter(np.zeros(channels), decay=False)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.gamma.shape[0]:
            raise ValueError(f"norm expects {self.gamma.shape[0]} channels, got {x.shape[1]}")
        if self.kind == "instance":
            return ops.instance_norm(x, self.gamma, self.beta, self.eps)
        return ops.group_norm(x, self.groups, self.gamma, self.beta, self.eps)


def InstanceNorm(channels: int) -> Norm:
    return Norm(channels, "instance")


def GroupNorm(channels: int, groups: int = GN_GROUPS) -> Norm:
    return Norm(channels, "group", groups)


class ConvNormAct(Module):
    """Conv -> Norm -> optional ReLU, the block every branch is built from."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 norm: str = "instance", act: bool = True):
        self.conv = Conv2d(c_in, c_out, kernel, rng)
        self.norm = Norm(c_out, norm)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm(self.conv(x))
        return relu(y) if self.act else y


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = Parameter(uniform(rng, (d_out, d_in), bound))
        self.bias = Parameter(uniform(rng, (d_out,), bound), decay=False)

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)
