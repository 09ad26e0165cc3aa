"""Dense tensors with a reverse-mode autodiff tape.

Every differentiable operation creates a :class:`Node` that remembers its
inputs and a closure mapping the output gradient to input gradients.  Nodes
carry a global sequence number, so the set of nodes reachable from a loss,
sorted by that number, is a valid topological order.  :func:`backward`
replays that :class:`Tape` in reverse.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}

_node_counter = itertools.count()
_grad_enabled = True


def _as_float_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        dtype = DTYPES.get(dtype, dtype)
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


class Node:
    """One recorded operation."""

    __slots__ = ("seq", "name", "inputs", "backward_fn")

    def __init__(self, name: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.seq = next(_node_counter)
        self.name = name
        self.inputs = tuple(inputs)
        # backward_fn(grad_out) -> tuple of grads aligned with inputs (None = no grad)
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"Node({self.name}, seq={self.seq})"


class Tensor:
    """N-dimensional float array with an optional gradient.

    Args:
        data: array-like. float32/float64 arrays keep their dtype, anything
            else becomes float32 unless ``dtype`` is given.
        requires_grad: whether :func:`backward` should populate ``grad``.
        dtype: ``"f32"``, ``"f64"`` or a numpy float dtype.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node(self) -> Optional[Node]:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4, threshold=20)}{grad})"

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        if other == 0:
            raise ZeroDivisionError("division of a Tensor by zero")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording for the duration of the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def record(name: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``out_data`` in a Tensor and attach a node if any input needs grad."""
    out = Tensor(out_data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(name, inputs, backward_fn)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementary differentiable ops ------------------------------------------
def add(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", None))
    b = _wrap(b, a.dtype)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return record("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", None))
    b = _wrap(b, a.dtype)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return record("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", None))
    b = _wrap(b, a.dtype)

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return record("mul", (a.data * b.data).astype(a.dtype, copy=False), (a, b), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", np.asarray(out, dtype=x.dtype), (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return record("reshape", x.data.reshape(shape), (x,), backward)


# -- the tape ---------------------------------------------------------------
class Tape:
    """Nodes reachable from a root, in recording order."""

    def __init__(self, nodes: Sequence[Node]):
        self.nodes = sorted(nodes, key=lambda n: n.seq)

    @classmethod
    def collect(cls, root: Tensor) -> "Tape":
        seen = {}
        stack = [root._node] if root._node is not None else []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen[id(node)] = node
            for t in node.inputs:
                if t._node is not None and id(t._node) not in seen:
                    stack.append(t._node)
        return cls(list(seen.values()))

    def __len__(self) -> int:
        return len(self.nodes)

    def run(self, root: Tensor, seed_grad: np.ndarray, visit: Optional[Callable[[Node], None]] = None) -> None:
        grads = {id(root._node): seed_grad}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if visit is not None:
                visit(node)
            in_grads = node.backward_fn(g)
            for t, tg in zip(node.inputs, in_grads):
                if tg is None or not t.requires_grad:
                    continue
                if t._node is not None:
                    key = id(t._node)
                    grads[key] = grads[key] + tg if key in grads else tg
                else:
                    tg = np.asarray(tg, dtype=t.dtype)
                    t.grad = tg.copy() if t.grad is None else t.grad + tg


def backward(loss: Tensor, visit: Optional[Callable[[Node], None]] = None) -> Tape:
    """Populate ``grad`` on every leaf tensor that ``loss`` depends on.

    Gradients accumulate across calls; clear them with ``zero_grad``.
    Returns the tape that was replayed.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {loss.shape}")
    seed = np.ones(loss.shape, dtype=loss.dtype)
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return Tape([])
    tape = Tape.collect(loss)
    tape.run(loss, seed, visit)
    return tape
