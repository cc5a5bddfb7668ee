"""Minimal module system: parameter containers and the standard layers."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .rng import trunc_normal
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor owned by a module."""

    __slots__ = ()


def parameter(data: np.ndarray) -> Parameter:
    return Parameter(data, requires_grad=True)


class Module:
    """Parameters and sub-modules are discovered from attributes in assignment order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for k, p in own.items():
            src = np.asarray(state[k])
            if src.shape != p.shape:
                raise ValueError(f"{k}: shape {src.shape} != {p.shape}")
            p.data = np.array(src, dtype=p.dtype, copy=True)

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        self.weight = parameter(trunc_normal(rng, (d_in, d_out), dtype=dtype))
        self.bias = parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-6):
        self.weight = parameter(np.ones(dim, dtype=dtype))
        self.bias = parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: Optional[int] = None, padding=0, dtype=np.float32):
        self.weight = parameter(trunc_normal(rng, (c_out, c_in, k, k), dtype=dtype))
        self.bias = parameter(np.zeros(c_out, dtype=dtype))
        self.stride = k if stride is None else stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def count_parameters(module: Module) -> int:
    return sum(p.size for p in module.parameters())
