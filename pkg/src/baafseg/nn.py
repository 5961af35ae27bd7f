"""Parameter containers built on the tensor engine."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Attribute-registered parameters, buffers and submodules, in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, "Module", str]]:
        """(qualified name, owner, attribute) for every non-trainable state array."""
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, self, name
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        for name, owner, attr in self.named_buffers():
            state[name] = getattr(owner, attr)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = {name: (owner, attr) for name, owner, attr in self.named_buffers()}
        missing = (set(params) | set(buffers)) - set(state)
        extra = set(state) - set(params) - set(buffers)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            if state[name].shape != p.data.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data = np.array(state[name], dtype=p.data.dtype)
        for name, (owner, attr) in buffers.items():
            setattr(owner, attr, np.array(state[name], dtype=np.float32))


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False):
        if zero:
            w = np.zeros((c_in, c_out))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / c_in), size=(c_in, c_out))
        self.weight = _param(w)
        self.bias = _param(np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-6):
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps
        self.cumulative_count = None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batch_norm(x, self, training)


def batch_norms(module: Module):
    for _, owner, attr in module.named_buffers():
        if attr == "running_mean":
            yield owner


class SharedMLP(Module):
    """Pointwise linear -> batch norm -> ReLU (a 1x1 convolution unit)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, activation: bool = True):
        self.linear = Linear(c_in, c_out, rng, bias=False)
        self.bn = BatchNorm(c_out)
        self.activation = activation

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = self.bn(self.linear(x), training)
        return T.relu(y) if self.activation else y
