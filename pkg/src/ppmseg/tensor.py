"""Tensor value type and a dynamic reverse-mode autodiff tape.

Every operation that receives at least one tensor with ``requires_grad`` set
records a node holding its parents and a closure mapping the output gradient
to one gradient per parent.  ``Tensor.backward`` walks the recorded graph in
reverse topological order and accumulates into the ``grad`` of leaf tensors.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """N-dimensional float array with optional gradient tracking.

    Feature maps are NCHW rank-4; parameters such as biases and batch-norm
    scales are rank-1.  A tensor is a *leaf* when it was created without
    parents; only leaves receive ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf", _keep_f64=False):
        arr = np.asarray(data)
        # float64 survives only on op outputs and grad_check probes
        if arr.dtype != DTYPE and not (_keep_f64 and arr.dtype == np.float64):
            arr = arr.astype(DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Optional[BackwardFn] = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, tensor has {self.data.size}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    def backward(self) -> None:
        backward(self)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap an op output, recording a graph node when any parent tracks gradients."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op, _keep_f64=True)
    return Tensor(data, op=op, _keep_f64=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def tensor_from(shape: Sequence[int], values, requires_grad: bool = False) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    flat = np.asarray(values, dtype=DTYPE).reshape(-1)
    expected = int(np.prod(shape))
    if flat.size != expected:
        raise ShapeError(f"{flat.size} values cannot fill shape {shape} ({expected} elements)")
    return Tensor(flat.reshape(shape).copy(), requires_grad=requires_grad)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scalar_mul(a: Tensor, s: float) -> Tensor:
    return make_result(a.data * a.data.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),), "scalar_mul")


def sum_all(a: Tensor) -> Tensor:
    """Sum of every element, returned as a (1, 1, 1, 1) tensor."""
    shape = a.shape
    total = np.sum(a.data, dtype=np.float64).astype(a.data.dtype).reshape(1, 1, 1, 1)
    return make_result(total, (a,), lambda g: (np.full(shape, g.reshape(-1)[0], dtype=g.dtype),), "sum_all")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return scalar_mul(sum_all(a), 1.0 / n)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into ``grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a single-element loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not attached to a recorded graph")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            g = g.astype(node.data.dtype, copy=False)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Maximum relative error between autodiff and central differences.

    The analytic gradient is taken at the tensor's own 32-bit precision.  The
    finite-difference side evaluates ``f`` on a float64 copy of ``x`` so that
    cancellation noise in ``f(x+eps) - f(x-eps)`` does not swamp small
    gradient entries; ops preserve float64 when handed it.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = leaf.grad.astype(np.float64).reshape(-1)

    base = x.data.astype(np.float64)
    numeric = np.empty(base.size)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(base, _keep_f64=True)).data.astype(np.float64).sum()
            flat[i] = orig - eps
            fm = f(Tensor(base, _keep_f64=True)).data.astype(np.float64).sum()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def zero_grad(params) -> None:
    for p in params:
        p.grad = None
