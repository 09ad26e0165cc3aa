"""Minimal module system: parameter discovery, train/eval flags, state dicts."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import ShapeError
from .ops import BatchNormState
from .tensor import Tensor


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype=np.float32) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def uniform_bias(rng: np.random.Generator, shape: tuple, fan_in: int, dtype=np.float32) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros(shape: tuple, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Module:
    """Base class.  Parameters are the ``requires_grad`` tensors found on the
    instance (directly, in submodules, or in lists of submodules), in
    attribute order."""

    training: bool = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

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
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState]]:
        for name, value in vars(self).items():
            if isinstance(value, BatchNormState):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            if buf.running_mean is not None:
                state[f"{name}.running_mean"] = buf.running_mean.copy()
                state[f"{name}.running_var"] = buf.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | {f"{b}.{s}" for b in buffers for s in ("running_mean", "running_var")}
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise ShapeError(f"state dict mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {state[name].shape}")
            p.data = state[name].astype(p.dtype, copy=True)
        for name, buf in buffers.items():
            buf.running_mean = state[f"{name}.running_mean"].copy()
            buf.running_var = state[f"{name}.running_var"].copy()


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = kaiming_uniform(rng, (c_out, c_in), c_in, dtype)
        self.bias = zeros((c_out,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.fully_connected(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = zeros((channels,), dtype)
        self.stats = BatchNormState.initialized(channels, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.stats, self.training)


class StaticConv2d(Module):
    """conv2d -> batch norm -> activation, with a single kernel."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel_size: int,
        stride: int = 1,
        padding: Optional[int] = None,
        groups: int = 1,
        activation: str = "relu",
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.kernel_size = c_in, c_out, kernel_size
        self.stride, self.groups = stride, groups
        self.padding = kernel_size // 2 if padding is None else padding
        self.activation = activation
        fan_in = (c_in // groups) * kernel_size**2
        self.weight = kaiming_uniform(rng, (c_out, c_in // groups, kernel_size, kernel_size), fan_in, dtype)
        self.bias = uniform_bias(rng, (c_out,), fan_in, dtype)
        self.bn = BatchNorm(c_out, dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)
        return ops.activation(self.bn(y), self.activation)
