"""Layer containers holding parameter tensors."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import DTYPE, Tensor


class Module:
    """Parameters are discovered by walking attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) ^ set(state))
            raise KeyError(f"parameter set mismatch: {missing[:5]}")
        for k, p in own.items():
            if p.shape != state[k].shape:
                raise ValueError(f"shape mismatch for {k}: {p.shape} vs {state[k].shape}")
            p.data = np.array(state[k], dtype=DTYPE, copy=True)


def _uniform(rng: Rng, shape, bound: float) -> Tensor:
    data = (rng.uniform(shape) * 2.0 - 1.0) * bound
    return Tensor(data.astype(DTYPE), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: Rng, scale: float = 1.0):
        bound = scale / math.sqrt(n_in)
        self.weight = _uniform(rng, (n_out, n_in), bound)
        self.bias = _uniform(rng, (n_out,), bound)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: Rng, k: int = 3, stride: int = 1, scale: float = 1.0):
        fan_in = c_in * k * k
        bound = scale / math.sqrt(fan_in)
        self.weight = _uniform(rng, (k, k, c_in, c_out), bound)
        self.bias = _uniform(rng, (c_out,), bound)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride)

    def zero_(self) -> None:
        self.weight.data[...] = 0.0
        self.bias.data[...] = 0.0


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int):
        self.groups = min(groups, channels)
        while channels % self.groups:
            self.groups -= 1
        self.gamma = Tensor(np.ones(channels, dtype=DTYPE), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=DTYPE), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: Rng):
        self.table = Tensor(rng.normal((n, dim)) * 0.02, requires_grad=True)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.table, ids)
