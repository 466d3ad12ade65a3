"""Minimal module system: parameter naming, train/eval switching, layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .errors import ConfigError
from .tensor import DTYPE, Tensor


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape).astype(DTYPE), requires_grad=True)


class Module:
    """Base class.  Parameters are discovered from attributes in definition order."""

    training: bool = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _own_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(())

    def _own_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._own_parameters():
            yield prefix + name, t
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._own_buffers():
            yield prefix + name, b
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
            if isinstance(m, BatchNorm2d):
                m.params.mode = "train" if mode else "eval"
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, groups: int = 1, bias: bool = False):
        if in_ch % groups or out_ch % groups:
            raise ConfigError(f"groups={groups} must divide in={in_ch} and out={out_ch} channels")
        if padding is None:
            padding = kernel // 2
        fan_in = (in_ch // groups) * kernel * kernel
        weight = he_normal(rng, (out_ch, in_ch // groups, kernel, kernel), fan_in)
        b = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None
        self.params = ops.ConvParams(weight, b, stride=stride, padding=padding, groups=groups)

    def _own_parameters(self):
        yield "weight", self.params.weight
        if self.params.bias is not None:
            yield "bias", self.params.bias

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.params)


class BatchNorm2d(Module):
    def __init__(self, channels: int, epsilon: float = 1e-5, momentum: float = 0.1):
        self.params = ops.NormParams.create(channels, epsilon, momentum)

    def _own_parameters(self):
        yield "gamma", self.params.gamma
        yield "beta", self.params.beta

    def _own_buffers(self):
        yield "running_mean", self.params.running_mean
        yield "running_var", self.params.running_var

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.params)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.weight = he_normal(rng, (out_features, in_features), in_features)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def _own_parameters(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)
