"""Attention over kernels: the dynamic convolution layer and dynamic perceptron.

A dynamic layer holds K kernels ``W_k`` (and biases ``b_k``) of identical
shape.  A squeeze-style branch maps each input sample to attention weights
``pi(x)`` on the K-simplex, and the sample is convolved with the convex
combination ``sum_k pi_k(x) W_k``.  Because convolution is linear in its
kernel this costs one convolution plus a cheap kernel aggregation.
"""

from __future__ import annotations

import enum
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import ops
from .errors import ConfigError, InvariantError, ShapeError
from .nn import BatchNorm, Module, kaiming_uniform, uniform_bias, zeros
from .ops import mac_category, tally
from .tensor import Tensor, record, reshape

SIMPLEX_TOL = 1e-5


class AggregationMode(enum.Enum):
    """How the kernel bank is combined at evaluation time."""

    ATTENTION = "attention"
    AVERAGE = "average"
    MAX_ATTENTION = "max"
    SHUFFLE_PER_SAMPLE = "shuffle_per_sample"
    SHUFFLE_ACROSS_SAMPLES = "shuffle_across_samples"

    @classmethod
    def parse(cls, value: Union[str, "AggregationMode"]) -> "AggregationMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            raise ConfigError(f"unknown aggregation mode {value!r}") from None


def reduction_dim(c_in: int) -> int:
    """Hidden width of the attention branch: a quarter of the input, at least 1."""
    return max(c_in // 4, 1)


def random_derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """A uniformly random permutation of ``range(n)`` with no fixed point."""
    if n < 2:
        raise ConfigError(f"no derangement exists for {n} element(s)")
    idx = np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == idx):
            return perm


class AttentionBranch(Module):
    """GAP -> FC(C_in, r) -> ReLU -> FC(r, K) -> softmax(z / tau).

    The second FC starts at zero, so a freshly built branch outputs exactly
    uniform attention.
    """

    def __init__(self, c_in: int, k: int, tau: float = 1.0, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        if k < 1:
            raise ConfigError(f"K must be >= 1, got {k}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.k = c_in, k
        self.hidden = reduction_dim(c_in)
        self.fc1_weight = kaiming_uniform(rng, (self.hidden, c_in), c_in, dtype)
        self.fc1_bias = zeros((self.hidden,), dtype)
        self.fc2_weight = zeros((k, self.hidden), dtype)
        self.fc2_bias = zeros((k,), dtype)
        self.tau = float(tau)

    def logits(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"attention branch expects {self.c_in} input channels, got shape {x.shape}")
        with mac_category("attention"):
            pooled = ops.global_avg_pool(x)
            hidden = ops.relu(ops.fully_connected(pooled, self.fc1_weight, self.fc1_bias))
            return ops.fully_connected(hidden, self.fc2_weight, self.fc2_bias)

    def forward(self, x: Tensor) -> Tensor:
        return attention_forward(self, x)


def attention_forward(branch: AttentionBranch, x: Tensor) -> Tensor:
    """Per-sample kernel attention ``(N, K)``; every row lies on the simplex."""
    return ops.softmax_with_temperature(branch.logits(x), branch.tau)


def check_simplex(pi: np.ndarray, tol: float = SIMPLEX_TOL) -> None:
    # non-finite rows come from non-finite inputs; the loss check reports those
    pi = pi[np.isfinite(pi).all(axis=-1)]
    sums = pi.sum(axis=-1)
    if not np.all(np.abs(sums - 1.0) <= tol):
        raise InvariantError(f"attention rows must sum to 1 (got sums {sums})")
    if np.any(pi < -tol):
        raise InvariantError("attention weights must be non-negative")


def aggregate_kernels(pi: Tensor, kernels: Tensor, biases: Optional[Tensor] = None):
    """Per-sample convex combinations of a kernel bank.

    Args:
        pi: attention ``(N, K)``, rows on the simplex.
        kernels: ``(K, *kernel_shape)``.
        biases: optional ``(K, C_out)``.

    Returns:
        ``(W, b)`` with ``W[n] = sum_k pi[n, k] * kernels[k]`` of shape
        ``(N, *kernel_shape)`` and ``b`` likewise (``None`` without biases).
    """
    if pi.ndim != 2 or pi.shape[1] != kernels.shape[0]:
        raise ShapeError(f"attention {pi.shape} does not match a bank of {kernels.shape[0]} kernels")
    if biases is not None and biases.shape[0] != kernels.shape[0]:
        raise ShapeError(f"bias bank {biases.shape} does not match kernel bank {kernels.shape}")
    check_simplex(pi.data)
    n, k = pi.shape
    kshape = kernels.shape[1:]
    flat = kernels.data.reshape(k, -1)
    with mac_category("aggregation"):
        tally(n * flat.size)
        if biases is not None:
            tally(n * biases.size)
    w = (pi.data @ flat).reshape((n,) + kshape).astype(kernels.dtype, copy=False)

    def w_backward(g):
        g = g.reshape(n, -1)
        return g @ flat.T, (pi.data.T @ g).reshape(kernels.shape)

    w_out = record("aggregate_kernels", w, (pi, kernels), w_backward)
    if biases is None:
        return w_out, None
    bflat = biases.data.reshape(k, -1)
    b = (pi.data @ bflat).reshape((n,) + biases.shape[1:]).astype(biases.dtype, copy=False)

    def b_backward(g):
        g = g.reshape(n, -1)
        return g @ bflat.T, (pi.data.T @ g).reshape(biases.shape)

    return w_out, record("aggregate_biases", b, (pi, biases), b_backward)


def apply_mode(pi: Tensor, mode: AggregationMode, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Replace attention according to an evaluation-time aggregation mode."""
    if mode is AggregationMode.ATTENTION:
        return pi
    n, k = pi.shape
    p = pi.data
    if mode is AggregationMode.AVERAGE:
        out = np.full((n, k), 1.0 / k, dtype=pi.dtype)
    elif mode is AggregationMode.MAX_ATTENTION:
        out = np.zeros_like(p)
        out[np.arange(n), p.argmax(axis=1)] = 1.0
    elif mode is AggregationMode.SHUFFLE_PER_SAMPLE:
        rng = rng if rng is not None else np.random.default_rng(0)
        out = np.stack([p[i, random_derangement(k, rng)] for i in range(n)])
    elif mode is AggregationMode.SHUFFLE_ACROSS_SAMPLES:
        if n < 2:
            raise ConfigError("shuffling attention across samples needs a batch of at least 2")
        rng = rng if rng is not None else np.random.default_rng(0)
        out = p[random_derangement(n, rng)]
    else:  # pragma: no cover
        raise ConfigError(f"unsupported mode {mode}")
    return Tensor(out)


class DynamicConv2d(Module):
    """K-kernel dynamic convolution followed by batch norm and an activation."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel_size: int,
        stride: int = 1,
        padding: Optional[int] = None,
        groups: int = 1,
        k: int = 4,
        tau: float = 1.0,
        activation: str = "relu",
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        if k < 1:
            raise ConfigError(f"K must be >= 1, got {k}")
        if c_in % groups or c_out % groups:
            raise ConfigError(f"channels ({c_in}, {c_out}) not divisible by groups={groups}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.kernel_size = c_in, c_out, kernel_size
        self.stride, self.groups, self.k = stride, groups, k
        self.padding = kernel_size // 2 if padding is None else padding
        self.activation = activation
        fan_in = (c_in // groups) * kernel_size**2
        kshape = (c_out, c_in // groups, kernel_size, kernel_size)
        self.kernels = Tensor(
            np.stack([kaiming_uniform(rng, kshape, fan_in, dtype).data for _ in range(k)]), requires_grad=True
        )
        self.biases = Tensor(
            np.stack([uniform_bias(rng, (c_out,), fan_in, dtype).data for _ in range(k)]), requires_grad=True
        )
        self.attention = AttentionBranch(c_in, k, tau, rng, dtype)
        self.bn = BatchNorm(c_out, dtype)
        self.last_attention: Optional[np.ndarray] = None

    @property
    def tau(self) -> float:
        return self.attention.tau

    @tau.setter
    def tau(self, value: float) -> None:
        self.attention.tau = float(value)

    def forward(self, x: Tensor, mode=AggregationMode.ATTENTION, rng=None) -> Tensor:
        return dynamic_conv_forward(self, x, mode, rng)


def per_sample_conv2d(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int, padding: int, groups: int) -> Tensor:
    """Convolve sample ``n`` of ``x`` with kernel ``w[n]`` (and bias ``b[n]``).

    Folds the batch into channels and runs one grouped convolution with
    ``N * groups`` groups.
    """
    n, c_in, h, wd = x.shape
    c_out = w.shape[1]
    xr = reshape(x, (1, n * c_in, h, wd))
    wr = reshape(w, (n * c_out,) + w.shape[2:])
    br = reshape(b, (n * c_out,)) if b is not None else None
    y = ops.conv2d(xr, wr, br, stride, padding, groups * n)
    return reshape(y, (n, c_out) + y.shape[2:])


def dynamic_conv_forward(
    layer: DynamicConv2d,
    x: Tensor,
    mode: Union[str, AggregationMode] = AggregationMode.ATTENTION,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """``act(BN(conv2d(x_n, W(x_n), b(x_n))))`` for every sample ``n``."""
    mode = AggregationMode.parse(mode)
    if layer.training and mode is not AggregationMode.ATTENTION:
        raise ConfigError(f"mode {mode.value!r} is evaluation-only; training requires attention")
    if x.ndim != 4 or x.shape[1] != layer.c_in:
        raise ShapeError(f"dynamic conv expects {layer.c_in} input channels, got shape {x.shape}")
    if mode is AggregationMode.AVERAGE:
        pi = apply_mode(Tensor(np.zeros((x.shape[0], layer.k), dtype=x.dtype)), mode)
    else:
        pi = attention_forward(layer.attention, x)
        layer.last_attention = pi.data.copy()
        pi = apply_mode(pi, mode, rng)
    w, b = aggregate_kernels(pi, layer.kernels, layer.biases)
    y = per_sample_conv2d(x, w, b, layer.stride, layer.padding, layer.groups)
    return ops.activation(layer.bn(y), layer.activation)


# -- dynamic perceptron -----------------------------------------------------------
def _activation_fn(g: Union[str, Callable, None]) -> Callable[[np.ndarray], np.ndarray]:
    if g is None or g == "identity" or g == "none":
        return lambda v: v
    if g == "relu":
        return lambda v: np.maximum(v, 0)
    if callable(g):
        return g
    raise ConfigError(f"unknown activation {g!r}")


def dynamic_perceptron_forward(
    weights: Sequence[np.ndarray],
    biases: Sequence[np.ndarray],
    pi: Sequence[float],
    x: np.ndarray,
    activation: Union[str, Callable, None] = None,
) -> np.ndarray:
    """``g((sum_k pi_k W_k)^T x + sum_k pi_k b_k)`` for a single input vector.

    Each ``W_k`` has shape ``(C_in, C_out)``.
    """
    pi = np.asarray(pi, dtype=np.float64)
    if len(weights) != len(pi) or len(biases) != len(pi):
        raise ShapeError("need one weight matrix and one bias per attention weight")
    if abs(pi.sum() - 1.0) > 1e-6 or np.any(pi < 0):
        raise InvariantError(f"attention {pi} is not on the simplex")
    w = sum(p * np.asarray(wk, dtype=np.float64) for p, wk in zip(pi, weights))
    b = sum(p * np.asarray(bk, dtype=np.float64) for p, bk in zip(pi, biases))
    return _activation_fn(activation)(w.T @ np.asarray(x, dtype=np.float64) + b)


# Two linear functions that solve XOR with one dynamic layer when the
# attention is pi = (x2, 1 - x2); the first output unit carries the answer.
XOR_DYNAMIC_WEIGHTS = (np.array([[-1.0, 0.0], [0.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 0.0]]))
XOR_DYNAMIC_BIASES = (np.array([1.0, 0.0]), np.array([0.0, 0.0]))

# Classic two-layer ReLU network for XOR.
XOR_STATIC_W = np.array([[1.0, 1.0], [1.0, 1.0]])
XOR_STATIC_B = np.array([0.0, -1.0])
XOR_STATIC_OUT = np.array([1.0, -2.0])

XOR_POINTS = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
XOR_LABELS = np.array([0, 1, 1, 0])


def xor_attention(x: np.ndarray) -> np.ndarray:
    return np.array([x[1], 1.0 - x[1]])


def dynamic_xor(x: np.ndarray) -> float:
    """Single dynamic layer with hand-set kernels and attention."""
    x = np.asarray(x, dtype=np.float64)
    y = dynamic_perceptron_forward(XOR_DYNAMIC_WEIGHTS, XOR_DYNAMIC_BIASES, xor_attention(x), x)
    return float(y[0])


def static_perceptron_xor(x: np.ndarray) -> float:
    """``w^T max(0, W^T x + b)`` with the classic XOR constants."""
    x = np.asarray(x, dtype=np.float64)
    return float(XOR_STATIC_OUT @ np.maximum(0.0, XOR_STATIC_W.T @ x + XOR_STATIC_B))


class DynamicPerceptron(Module):
    """Trainable dynamic perceptron with attention ``softmax(FC(x) / tau)``.

    Per sample ``y = sum_k pi_k(x) (W_k x + b_k)``.  The per-sample matrix
    product reuses the grouped 1x1 convolution path.
    """

    def __init__(self, c_in: int, c_out: int, k: int = 2, tau: float = 1.0, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.weights = Tensor(
            np.stack([kaiming_uniform(rng, (c_out, c_in), c_in, dtype).data for _ in range(k)]), requires_grad=True
        )
        self.biases = Tensor(
            np.stack([uniform_bias(rng, (c_out,), c_in, dtype).data for _ in range(k)]), requires_grad=True
        )
        self.att_weight = kaiming_uniform(rng, (k, c_in), c_in, dtype)
        self.att_bias = zeros((k,), dtype)
        self.tau = float(tau)

    def attention(self, x: Tensor) -> Tensor:
        return ops.softmax_with_temperature(ops.fully_connected(x, self.att_weight, self.att_bias), self.tau)

    def forward(self, x: Tensor, mode=AggregationMode.ATTENTION, rng=None) -> Tensor:
        mode = AggregationMode.parse(mode)
        if self.training and mode is not AggregationMode.ATTENTION:
            raise ConfigError("training requires attention mode")
        n = x.shape[0]
        pi = apply_mode(self.attention(x), mode, rng)
        w, b = aggregate_kernels(pi, self.weights, self.biases)
        x4 = reshape(x, (n, self.c_in, 1, 1))
        w4 = reshape(w, (n, self.c_out, self.c_in, 1, 1))
        y = per_sample_conv2d(x4, w4, b, 1, 0, 1)
        return reshape(y, (n, self.c_out))

    def set_temperature(self, tau: float) -> None:
        self.tau = float(tau)
