"""Parameter containers and the small layer set the network is built from."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class: parameters are discovered from attributes in insertion order."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data) for name, p in self.named_parameters())

    def load_state_dict(self, state, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            unknown = [k for k in state if k not in own]
            if unknown:
                raise KeyError(f"unknown parameter {unknown[0]!r}")
            missing = [k for k in own if k not in state]
            if missing:
                raise KeyError(f"missing parameter {missing[0]!r}")
        for name, value in state.items():
            if name not in own:
                continue
            target = own[name]
            value = np.asarray(value)
            if value.shape != target.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: checkpoint {value.shape} vs model {target.shape}")
            target.data = value.astype(target.dtype, copy=True)


def group_count(channels: int, max_groups: int = 8) -> int:
    """Largest divisor of ``channels`` that does not exceed ``max_groups``."""
    for g in range(min(max_groups, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, dilation: int = 1, bias: bool = True,
                 dtype=np.float32):
        fan_in = cin * kernel * kernel
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(cout, cin, kernel, kernel))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None
        self.stride, self.padding, self.dilation = stride, padding, dilation

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class GroupNorm(Module):
    def __init__(self, channels: int, dtype=np.float32, eps: float = 1e-8, max_groups: int = 8):
        self.groups = group_count(channels, max_groups)
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.gamma, self.beta, self.eps)


class ConvNormReLU(Module):
    """conv (no bias) -> group norm -> ReLU."""

    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, dilation: int = 1, dtype=np.float32, max_groups: int = 8):
        pad = dilation * (kernel - 1) // 2
        self.conv = Conv2d(cin, cout, kernel, rng, stride=stride, padding=pad,
                           dilation=dilation, bias=False, dtype=dtype)
        self.norm = GroupNorm(cout, dtype=dtype, max_groups=max_groups)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.norm(self.conv(x)))
