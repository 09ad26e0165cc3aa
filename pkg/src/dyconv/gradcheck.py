"""Central finite-difference checks for every differentiable op.

Each check builds a random float64 problem, reduces the op output to a
scalar with a fixed random projection, and compares the tape gradient of
every input against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .dynamic import AttentionBranch, DynamicConv2d, aggregate_kernels, attention_forward, dynamic_conv_forward
from .ops import BatchNormState
from .tensor import Tensor, backward, reshape

FD_STEP = 1e-5
TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def numerical_gradient(f: Callable[[], float], t: Tensor, eps: float = FD_STEP) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. the entries of ``t``."""
    grad = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def _corrupting_visitor(op_name: Optional[str]):
    if op_name is None:
        return None

    def visit(node):
        if node.name == op_name:
            inner = node.backward_fn
            node.backward_fn = lambda g: tuple(None if r is None else 1.5 * r for r in inner(g))

    return visit


def check_function(
    name: str,
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    rng: np.random.Generator,
    corrupt: Optional[str] = None,
) -> CheckResult:
    """Compare tape and finite-difference gradients of ``sum(fn() * R)``."""
    out = fn()
    proj = rng.normal(size=out.shape)

    def scalar() -> float:
        return float((fn().data * proj).sum())

    for t in inputs:
        t.grad = None
    out = fn()
    backward((out * Tensor(proj)).sum(), visit=_corrupting_visitor(corrupt))
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numerical_gradient(scalar, t)))
    return CheckResult(name, worst)


def _param(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True, dtype="f64")


def run_all(seed: int = 0, corrupt: Optional[str] = None) -> list[CheckResult]:
    """Run every check; ``corrupt`` names a tape op whose backward is scaled
    by 1.5 (negative control)."""
    rng = np.random.default_rng(seed)
    results = []

    def check(name, fn, inputs):
        results.append(check_function(name, fn, inputs, rng, corrupt))

    a, b = _param(rng, 3, 4), _param(rng, 1, 4)
    check("add", lambda: a + b, [a, b])
    check("mul", lambda: a * b, [a, b])
    check("sum", lambda: (a * a).sum(axis=1), [a])
    check("reshape", lambda: reshape(a, (2, 6)) * reshape(a, (2, 6)), [a])

    x = _param(rng, 2, 4, 6, 6)
    w = _param(rng, 6, 2, 3, 3)
    bias = _param(rng, 6)
    check("conv2d", lambda: ops.conv2d(x, w, bias, stride=2, padding=1, groups=2), [x, w, bias])

    xf, wf, bf = _param(rng, 4, 5), _param(rng, 3, 5), _param(rng, 3)
    check("fully_connected", lambda: ops.fully_connected(xf, wf, bf), [xf, wf, bf])

    check("global_avg_pool", lambda: ops.global_avg_pool(x), [x])
    check("relu", lambda: ops.relu(x), [x])
    x6 = Tensor(rng.uniform(-2, 8, size=(3, 7)), requires_grad=True)
    check("relu6", lambda: ops.relu6(x6), [x6])

    xb = _param(rng, 2, 3, 4, 4)
    gamma = Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
    beta = _param(rng, 3)
    state = BatchNormState.initialized(3, np.float64)
    check("batch_norm[train]", lambda: ops.batch_norm(xb, gamma, beta, state, True), [xb, gamma, beta])
    frozen = BatchNormState(rng.normal(size=3), rng.uniform(0.5, 2.0, size=3))
    check("batch_norm[eval]", lambda: ops.batch_norm(xb, gamma, beta, frozen, False), [xb, gamma, beta])

    z = _param(rng, 4, 5)
    check("softmax_with_temperature", lambda: ops.softmax_with_temperature(z, 3.0), [z])
    labels = rng.integers(0, 5, size=4)
    check("cross_entropy_loss", lambda: ops.cross_entropy_loss(z, labels), [z])

    logits = _param(rng, 3, 4)
    kernels, kbias = _param(rng, 4, 2, 3, 3, 3), _param(rng, 4, 2)
    check(
        "aggregate_kernels",
        lambda: aggregate_kernels(ops.softmax_with_temperature(logits, 1.0), kernels, kbias)[0],
        [logits, kernels],
    )
    check(
        "aggregate_biases",
        lambda: aggregate_kernels(ops.softmax_with_temperature(logits, 1.0), kernels, kbias)[1],
        [logits, kbias],
    )

    branch = AttentionBranch(8, 4, tau=2.0, rng=rng, dtype=np.float64)
    _randomize(branch, rng)
    xa = _param(rng, 3, 8, 5, 5)
    check("attention_forward", lambda: attention_forward(branch, xa), [xa] + branch.parameters())

    layer = DynamicConv2d(8, 6, 3, stride=2, groups=2, k=3, tau=1.5, rng=rng, dtype=np.float64)
    _randomize(layer, rng)
    xd = _param(rng, 3, 8, 5, 5)
    fwd = lambda: dynamic_conv_forward(layer, xd)  # noqa: E731
    check("dynamic_conv_forward[input]", fwd, [xd])
    check("dynamic_conv_forward[kernels]", fwd, [layer.kernels, layer.biases])
    check("dynamic_conv_forward[attention]", fwd, layer.attention.parameters())
    check("dynamic_conv_forward[bn]", fwd, [layer.bn.gamma, layer.bn.beta])
    return results


def _randomize(module, rng) -> None:
    # zero-initialized attention heads would hide the fc1 path
    for p in module.parameters():
        if not np.any(p.data):
            p.data = rng.normal(scale=0.5, size=p.shape)
