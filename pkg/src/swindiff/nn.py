"""Parameter containers and the few layers the denoiser is built from."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal draws redrawn until they fall within ``bound`` standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(T.get_default_dtype())


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=T.get_default_dtype()), requires_grad=True)


class Module:
    """Attribute-order parameter registry, enough for naming and checkpoints."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = param(trunc_normal(rng, (n_in, n_out)))
        self.bias = param(np.zeros(n_out)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv3d(Module):
    """Stride-1, extent-preserving convolution with kernel 1 or 3."""

    def __init__(self, n_in: int, n_out: int, kernel: int, rng: np.random.Generator,
                 zero: bool = False):
        shape = (kernel, kernel, kernel, n_in, n_out)
        if zero:
            w = np.zeros(shape)
        else:
            w = rng.standard_normal(shape) / math.sqrt(n_in * kernel ** 3)
        self.weight = param(w)
        self.bias = param(np.zeros(n_out))

    def forward(self, x):
        return T.conv3d(x, self.weight, self.bias)


def norm_groups(channels: int, max_groups: int = 32) -> int:
    """Largest group count not above ``max_groups`` that divides ``channels``."""
    return math.gcd(max_groups, channels)


class GroupNorm(Module):
    def __init__(self, channels: int, max_groups: int = 32):
        self.groups = norm_groups(channels, max_groups)
        self.gamma = param(np.ones(channels))
        self.beta = param(np.zeros(channels))

    def forward(self, x):
        return T.group_norm(x, self.groups, self.gamma, self.beta)
