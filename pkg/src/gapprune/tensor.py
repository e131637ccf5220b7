"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a NumPy array. Operations on tensors that require
gradients record their inputs and a backward closure, so the executed graph
can be replayed in reverse by :meth:`Tensor.backward`. Only leaf tensors
(those not produced by an operation) keep a ``.grad`` buffer; repeated
backward passes accumulate into it until :meth:`Tensor.zero_grad`.

Single precision is the default scalar type. Pass ``dtype=np.float64`` when
building leaves to run a graph in wide precision; every op preserves the
dtype of its inputs.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

DEFAULT_DTYPE = np.float32
WIDE_DTYPE = np.float64

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _as_float_array(data: ArrayLike, dtype) -> np.ndarray:
    if isinstance(data, np.ndarray) and dtype is None:
        if data.dtype in (np.float32, np.float64):
            return data
        return data.astype(DEFAULT_DTYPE)
    return np.asarray(data, dtype=dtype or DEFAULT_DTYPE)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype=None,
        *,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
        op: str = "leaf",
    ):
        arr = _as_float_array(data, dtype)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by {op!r}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- construction helpers -------------------------------------------

    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        parents: Tuple["Tensor", ...],
        backward: BackwardFn,
        op: str,
    ) -> "Tensor":
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        if not track:
            return cls(data, op=op)
        return cls(data, requires_grad=True, _parents=parents, _backward=backward, op=op)

    @staticmethod
    def lift(value: Union["Tensor", ArrayLike], like: "Tensor") -> "Tensor":
        if isinstance(value, Tensor):
            return value
        return Tensor(np.asarray(value, dtype=like.dtype))

    # -- array protocol -------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = Tensor.lift(other, self)
        a_shape, b_shape = self.shape, other.shape
        try:
            out = self.data + other.data
        except ValueError as exc:
            raise DimensionError(f"cannot add shapes {a_shape} and {b_shape}") from exc

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._from_op(out, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> "Tensor":
        return self + (-Tensor.lift(other, self))

    def __rsub__(self, other) -> "Tensor":
        return Tensor.lift(other, self) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = Tensor.lift(other, self)
        a, b = self.data, other.data
        try:
            out = a * b
        except ValueError as exc:
            raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._from_op(out, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        other = Tensor.lift(other, self)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul needs [N,D]@[D,K], got {a.shape} and {b.shape}")

        def backward(g):
            return g @ b.T, a.T @ g

        return Tensor._from_op(a @ b, (self, other), backward, "matmul")

    def sum(self) -> "Tensor":
        shape = self.shape
        dtype = self.dtype

        def backward(g):
            return (np.broadcast_to(g, shape).astype(dtype),)

        return Tensor._from_op(np.asarray(self.data.sum(), dtype=dtype), (self,), backward, "sum")

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.size)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {old} to {shape}") from exc
        return Tensor._from_op(out, (self,), lambda g: (g.reshape(old),), "reshape")

    # -- autograd -------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``.grad`` of every reachable leaf that requires grad.

        Raises:
            ContractError: if this tensor is not a scalar.
        """
        if self.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        pending = {id(self): np.ones(self.shape, dtype=self.dtype)}
        for node in reversed(build_tape(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def build_tape(root: Tensor) -> list:
    """Return the graph feeding ``root`` in topological order.

    Every node appears after all of its inputs; ``root`` is last.
    """
    order = []
    seen = set()
    stack = [(root, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def tensor(data: ArrayLike, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)
