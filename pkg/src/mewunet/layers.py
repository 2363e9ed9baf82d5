"""Parameter containers and the small set of layers the network is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; buffers are
    ``Tensor`` attributes without it. Submodules may be attributes or lists.
    Attribute insertion order defines parameter order.
    """

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{key}.{i}", item
            else:
                yield key, value

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_tensors(name + ".")

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_tensors() if t.requires_grad]

    def named_buffers(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_tensors() if not t.requires_grad]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


def uniform_param(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def const_param(shape, value: float, dtype=np.float64) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True, dtype=dtype)


class Pointwise(Module):
    def __init__(self, c_in: int, c_out: int, rng, bias: bool = True, dtype=np.float64):
        self.weight = uniform_param(rng, (c_out, c_in), c_in, dtype)
        self.bias = const_param((c_out,), 0.0, dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_pointwise(x, self.weight, self.bias)


class Depthwise(Module):
    """Depthwise convolution; ``kernel`` may be rectangular, e.g. (1, 3)."""

    def __init__(self, channels: int, rng, kernel=(3, 3), stride: int = 1, bias: bool = False, dtype=np.float64):
        kh, kw = kernel
        self.stride = stride
        self.padding = (kh // 2, kw // 2)
        self.weight = uniform_param(rng, (channels, kh, kw), kh * kw, dtype)
        self.bias = const_param((channels,), 0.0, dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_depthwise(x, self.weight, self.stride, self.padding, self.bias)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 4, eps: float = 1e-5, dtype=np.float64):
        if channels % groups:
            raise T.ShapeError(f"GroupNorm: {channels} channels not divisible by {groups} groups")
        self.groups = groups
        self.eps = eps
        self.gamma = const_param((channels,), 1.0, dtype)
        self.beta = const_param((channels,), 0.0, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.gamma, self.beta, self.eps)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        self.momentum = momentum
        self.eps = eps
        self.gamma = const_param((channels,), 1.0, dtype)
        self.beta = const_param((channels,), 0.0, dtype)
        self.running_mean = Tensor(np.zeros(channels), dtype=dtype)
        self.running_var = Tensor(np.ones(channels), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(
            x, self.gamma, self.beta, self.running_mean.data, self.running_var.data,
            self.training, self.momentum, self.eps,
        )


def make_norm(kind: str, channels: int, dtype=np.float64) -> Module:
    if kind == "group":
        return GroupNorm(channels, 4, dtype=dtype)
    if kind == "batch":
        return BatchNorm(channels, dtype=dtype)
    raise ValueError(f"unknown norm kind {kind!r} (expected 'group' or 'batch')")


class SeparableConv(Module):
    """Depthwise 3x3 (optionally strided) -> pointwise -> norm -> GELU."""

    def __init__(self, c_in: int, c_out: int, rng, stride: int = 1, norm: str = "group", dtype=np.float64):
        self.dw = Depthwise(c_in, rng, (3, 3), stride, bias=False, dtype=dtype)
        self.pw = Pointwise(c_in, c_out, rng, dtype=dtype)
        self.norm = make_norm(norm, c_out, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.gelu(self.norm(self.pw(self.dw(x))))
