"""Dense float32 tensor with reverse-mode automatic differentiation.

Network activations are rank-4 ``(N, C, H, W)`` arrays; logits, losses and
parameter vectors use the same class with other ranks.  Every differentiable
operator records its parents and a closure mapping the output gradient to one
gradient per parent.  :meth:`Tensor.backward` walks the recorded graph in
reverse topological order and accumulates gradients by addition, so a tensor
consumed by several operators receives the sum of their contributions.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import UsageError

DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (evaluation, finite differences)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        """Wrap an operator result, recording the graph edge when any parent needs it."""
        out = cls.__new__(cls)
        out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
        out.grad = None
        out.name = None
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # graph traversal

    def _topological_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor, which must hold a single element."""
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise UsageError("backward() on a tensor that does not require grad")
        self.grad = np.asarray(grad, dtype=DTYPE).reshape(self.shape).copy()
        for node in reversed(self._topological_order()):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g, dtype=DTYPE).reshape(parent.shape)
                # out-of-place accumulation: backward closures may hand the same
                # array to several parents, so no gradient buffer is ever mutated
                parent.grad = g if parent.grad is None else parent.grad + g
        # release the graph so intermediate buffers can be collected
        for node in self._topological_order():
            node._parents = ()
            node._backward = None

    # elementwise arithmetic used by blocks and tests

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, mul(other, -1.0))

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return Tensor.from_op(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum same-shaped tensors left to right; a single input is returned unchanged."""
    if len(tensors) == 1:
        return tensors[0]
    out = tensors[0].data + tensors[1].data
    for t in tensors[2:]:
        out = out + t.data
    n = len(tensors)
    return Tensor.from_op(out, tuple(tensors), lambda g: (g,) * n)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        sa, sb = a.shape, b.shape
        ad, bd = a.data, b.data
        return Tensor.from_op(
            ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb))
        )
    c = DTYPE(b)
    return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,))


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=DTYPE)
    return Tensor.from_op(out, (a,), lambda g: (np.broadcast_to(g, shape),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g: np.ndarray):
        return np.split(g, bounds, axis=axis)

    return Tensor.from_op(out, tuple(tensors), backward)
