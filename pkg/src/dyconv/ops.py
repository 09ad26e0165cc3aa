"""Primitive neural-network operations on :class:`~dyconv.tensor.Tensor`.

All ops are differentiable through the tape in :mod:`dyconv.tensor`.
Convolution uses an im2col lowering with a batched matmul per group; the
result is contractually equal to direct summation.

Multiply-accumulates can be tallied with :func:`count_macs`, which the cost
model's executor check relies on.
"""

from __future__ import annotations

import contextlib
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, ShapeError, StateError
from .tensor import Tensor, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# -- multiply-accumulate instrumentation --------------------------------------
class MacCounter:
    """Accumulates multiply-accumulate counts per category."""

    def __init__(self):
        self.counts: dict[str, int] = defaultdict(int)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def __getitem__(self, key: str) -> int:
        return self.counts.get(key, 0)


_counters: list[MacCounter] = []
_categories: list[str] = ["conv"]


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


@contextlib.contextmanager
def mac_category(name: str) -> Iterator[None]:
    _categories.append(name)
    try:
        yield
    finally:
        _categories.pop()


def tally(n: int) -> None:
    if _counters:
        for counter in _counters:
            counter.counts[_categories[-1]] += int(n)


# -- convolution ----------------------------------------------------------------
def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation over an NCHW batch.

    Args:
        x: input of shape ``(N, C_in, H, W)``.
        weight: kernels of shape ``(C_out, C_in // groups, kH, kW)``.
        bias: optional ``(C_out,)``.
        stride, padding, groups: usual convolution geometry.

    Returns:
        Tensor of shape ``(N, C_out, H', W')`` with
        ``H' = (H + 2 * padding - kH) // stride + 1``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if not isinstance(groups, (int, np.integer)) or groups < 1:
        raise ConfigError(f"groups must be a positive int, got {groups!r}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"invalid stride={stride} / padding={padding}")
    n, c_in, h, w = x.shape
    c_out, cg, kh, kw = weight.shape
    if c_in % groups or c_out % groups:
        raise ConfigError(f"channels ({c_in} in, {c_out} out) not divisible by groups={groups}")
    if cg * groups != c_in:
        raise ShapeError(f"weight expects {cg * groups} input channels, input has {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match C_out={c_out}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")

    g = groups
    og = c_out // g
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (G, N*H'*W', Cg*kh*kw)
    cols = (
        win.reshape(n, g, cg, ho, wo, kh, kw)
        .transpose(1, 0, 3, 4, 2, 5, 6)
        .reshape(g, n * ho * wo, cg * kh * kw)
    )
    wmat = weight.data.reshape(g, og, cg * kh * kw)
    out = np.matmul(cols, wmat.transpose(0, 2, 1))  # (G, N*H'*W', Og)
    out = out.reshape(g, n, ho, wo, og).transpose(1, 0, 4, 2, 3).reshape(n, c_out, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)
    out = np.ascontiguousarray(out, dtype=x.dtype)
    tally(n * ho * wo * c_out * cg * kh * kw)

    def backward(grad):
        gout = grad.reshape(n, g, og, ho, wo).transpose(1, 0, 3, 4, 2).reshape(g, n * ho * wo, og)
        gw = np.matmul(gout.transpose(0, 2, 1), cols).reshape(weight.shape)
        gb = grad.sum(axis=(0, 2, 3)) if bias is not None else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(gout, wmat).reshape(g, n, ho, wo, cg, kh, kw)
            gcols = gcols.transpose(1, 0, 4, 5, 6, 2, 3).reshape(n, c_in, kh, kw, ho, wo)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", out, inputs, backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``y = x @ weight.T + bias`` for ``x`` of shape ``(N, C_in)``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"fully_connected: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match C_out={weight.shape[0]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    tally(x.shape[0] * weight.shape[0] * weight.shape[1])

    def backward(g):
        gb = g.sum(axis=0) if bias is not None else None
        return g @ weight.data, g.T @ x.data, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("fully_connected", out.astype(x.dtype, copy=False), inputs, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes of an NCHW tensor -> ``(N, C)``."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h * w < 1:
        raise ShapeError("global_avg_pool over empty spatial dims")
    tally(n * c * h * w)

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return record("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    # np.maximum keeps NaN visible so divergence is detected downstream
    return record("relu", np.maximum(x.data, 0).astype(x.dtype), (x,), backward)


def relu6(x: Tensor) -> Tensor:
    mask = (x.data > 0) & (x.data < 6)

    def backward(g):
        return (g * mask,)

    return record("relu6", np.clip(x.data, 0, 6), (x,), backward)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "relu6":
        return relu6(x)
    if kind == "none":
        return x
    raise ConfigError(f"unknown activation {kind!r}")


# -- batch normalization --------------------------------------------------------
@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer; ``None`` means uninitialized."""

    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def initialized(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization of an ``(N, C)`` or ``(N, C, H, W)`` tensor.

    In training mode the batch statistics normalize the input (and are
    differentiated through) and the running statistics are updated in place.
    In eval mode the running statistics are used.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm expects (N, C) or NCHW, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm parameters must have length C={c}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    m = x.size // c

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        if state.running_mean is None:
            state.running_mean = np.zeros(c, dtype=x.dtype)
            state.running_var = np.ones(c, dtype=x.dtype)
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(x.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(x.dtype)
    else:
        if state.running_mean is None or state.running_var is None:
            raise StateError("batch_norm in eval mode needs initialized running statistics")
        mean, var = state.running_mean, state.running_var

    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    out = (xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)).astype(x.dtype)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = dxhat * inv.reshape(bshape)
        return gx.astype(x.dtype), ggamma, gbeta

    return record("batch_norm", out, (x, gamma, beta), backward)


# -- softmax and loss -----------------------------------------------------------
def softmax_with_temperature(z: Tensor, tau: float) -> Tensor:
    """Row-wise ``exp(z / tau) / sum(exp(z / tau))`` with max subtraction."""
    if not (tau > 0) or not math.isfinite(tau):
        raise ConfigError(f"temperature must be a positive finite number, got {tau}")
    if z.ndim != 2 or z.shape[1] < 1:
        raise ShapeError(f"softmax expects (N, K) logits, got {z.shape}")
    s = z.data / tau
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    p = (e / e.sum(axis=1, keepdims=True)).astype(z.dtype)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)) / tau,)

    return record("softmax_with_temperature", p, (z,), backward)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c or not np.issubdtype(labels.dtype, np.integer)):
        raise DataError(f"labels must be integers in [0, {c})")
    s = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(s).sum(axis=1, keepdims=True))
    logp = s - logz
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return record("cross_entropy_loss", np.asarray(loss, dtype=logits.dtype), (logits,), backward)
