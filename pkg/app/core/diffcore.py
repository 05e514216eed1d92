"""
Reverse-mode automatic differentiation over dense float64 arrays, plus Adam.

A ``Tensor`` produced by a primitive keeps references to its inputs and a
closure mapping the output gradient to input gradients. The record is rebuilt
on every forward evaluation; ``backward`` walks it in reverse topological
order and accumulates gradients into leaves that require them.
"""
from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.exceptions import DimensionError, DomainError, NonFiniteError, UsageError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

# one flag per thread and per asyncio task
_grad_enabled: ContextVar[bool] = ContextVar("grad_enabled", default=True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate primitives without recording them (current thread or task only)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    """Dense float64 array taking part in a recorded computation."""

    __slots__ = ("values", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(
        self,
        values: ArrayLike,
        requires_grad: bool = False,
        *,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
        op: str = "leaf",
    ):
        if isinstance(values, Tensor):
            values = values.values
        if op == "leaf":
            self.values = np.array(values, dtype=np.float64)
        else:
            self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self._parents = _parents
        self._backward = _backward
        if op == "leaf":
            _check_finite(self.values, op)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.values.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __deepcopy__(self, memo) -> "Tensor":
        # copies are fresh leaves: no record, no gradient
        return Tensor(self.values, requires_grad=self.requires_grad)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    __array_priority__ = 1000

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return subtract(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return subtract(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return multiply(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return multiply(other, self)

    def __truediv__(self, other: float) -> "Tensor":
        if isinstance(other, Tensor):
            raise UsageError("division is only defined by constants")
        return scale(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return negate(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __rmatmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(other, self)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"Non-finite value produced by '{op}'", op=op)


def _record(values: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    _check_finite(values, op)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(values, op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"'{op}' cannot combine shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- primitives

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.values + b.values, (a, b), _backward, "add")


def subtract(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "subtract")

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.values - b.values, (a, b), _backward, "subtract")


def multiply(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "multiply")

    def _backward(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _record(a.values * b.values, (a, b), _backward, "multiply")


def scale(a: ArrayLike, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)

    def _backward(g):
        return (g * factor,)

    return _record(a.values * factor, (a,), _backward, "scale")


def negate(a: ArrayLike) -> Tensor:
    return scale(a, -1.0)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix-matrix or matrix-vector product (operands of rank 1 or 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or (a.ndim == 1 and b.ndim == 1):
        raise DimensionError(f"matmul expects matrix operands, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def _backward(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.values.T, a.values.T @ g
        if b.ndim == 1:
            return np.outer(g, b.values), a.values.T @ g
        return b.values @ g, np.outer(a.values, g)

    return _record(a.values @ b.values, (a, b), _backward, "matmul")


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)

    def _backward(g):
        return (g * out,)

    return _record(out, (a,), _backward, "exp")


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.values <= 0.0):
        raise DomainError("log of a non-positive value")

    def _backward(g):
        return (g / a.values,)

    return _record(np.log(a.values), (a,), _backward, "log")


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def _backward(g):
        return (2.0 * a.values * g,)

    return _record(a.values * a.values, (a,), _backward, "square")


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.values)

    def _backward(g):
        return (g * (1.0 - out * out),)

    return _record(out, (a,), _backward, "tanh")


def leaky_relu(a: ArrayLike, negative_slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    slope = np.where(a.values > 0.0, 1.0, negative_slope)

    def _backward(g):
        return (g * slope,)

    return _record(a.values * slope, (a,), _backward, "leaky_relu")


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis: Optional[int]) -> np.ndarray:
    if axis is not None:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def sum(a: ArrayLike, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def _backward(g):
        return (_expand_reduced(g, a.shape, axis),)

    return _record(np.sum(a.values, axis=axis), (a,), _backward, "sum")


def mean(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    count = a.values.size if axis is None else a.shape[axis]
    if count == 0:
        raise UsageError("mean over an empty dimension")
    return scale(sum(a, axis=axis), 1.0 / count)


def sq_norm(a: ArrayLike, axis: Optional[int] = -1) -> Tensor:
    """Squared Euclidean norm along ``axis`` (all entries when ``axis`` is None)."""
    a = as_tensor(a)

    def _backward(g):
        return (2.0 * a.values * _expand_reduced(g, a.shape, axis),)

    return _record(np.sum(a.values * a.values, axis=axis), (a,), _backward, "sq_norm")


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise UsageError("concat of an empty sequence")
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat shape mismatch: {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tensors, _backward, "concat")


def split(a: ArrayLike, sizes: Sequence[int], axis: int = -1) -> List[Tensor]:
    """Split into consecutive pieces of the given sizes along ``axis``."""
    a = as_tensor(a)
    if any(s < 0 for s in sizes) or int(np.sum(sizes)) != a.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover dimension {a.shape[axis]}")
    pieces = []
    start = 0
    for size in sizes:
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, start + size)
        index = tuple(index)

        def _backward(g, index=index):
            full = np.zeros_like(a.values)
            full[index] = g
            return (full,)

        pieces.append(_record(a.values[index], (a,), _backward, "split"))
        start += size
    return pieces


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.values.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}") from e

    def _backward(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), _backward, "reshape")


def permute(a: ArrayLike, perm: Sequence[int], axis: int = -1) -> Tensor:
    """Reorder entries along ``axis`` so that ``out[..., i] = a[..., perm[i]]``."""
    a = as_tensor(a)
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(a.shape[axis])):
        raise DimensionError(f"{perm.tolist()} is not a permutation of {a.shape[axis]} entries")
    inverse = np.argsort(perm)

    def _backward(g):
        return (np.take(g, inverse, axis=axis),)

    return _record(np.take(a.values, perm, axis=axis), (a,), _backward, "permute")


# ---------------------------------------------------------------- backward

class ComputationRecord:
    """Nodes reachable from a root, in topological order (inputs first)."""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationRecord":
        visited = set()
        order: List[Tensor] = []
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

    Gradients add to whatever a leaf already holds, so calling backward twice
    without ``zero_grad`` sums both contributions.
    """
    if root.values.ndim != 0:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise UsageError("backward called on a tensor with an empty computation record")

    record = ComputationRecord.from_root(root)
    grads = {id(root): np.ones_like(root.values)}
    for node in reversed(record.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls(
            m=[np.zeros_like(p, dtype=np.float64) for p in params],
            v=[np.zeros_like(p, dtype=np.float64) for p in params],
            **hyper,
        )


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
) -> Tuple[List[np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new parameters and a new state."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionError("params, grads and Adam moments differ in length")
    t = state.t + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"Adam shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        new_params.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(
        m=new_m, v=new_v, t=t, lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps
    )
    return new_params, new_state


class Adam:
    """Adam over a list of leaf tensors; missing gradients count as zero."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.state = AdamState.zeros_like(
            [p.values for p in self.params], lr=lr, beta1=beta1, beta2=beta2, eps=eps
        )

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.values) for p in self.params]
        new_values, self.state = adam_step([p.values for p in self.params], grads, self.state)
        for p, values in zip(self.params, new_values):
            p.values = values

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def snapshot(self) -> "AdamSnapshot":
        # steps rebind p.values and the moment arrays instead of writing into them
        return AdamSnapshot(values=[p.values for p in self.params], state=replace(self.state))

    def restore(self, snapshot: "AdamSnapshot") -> None:
        """Roll parameters and moments back; the current learning rate is kept."""
        lr = self.lr
        for p, values in zip(self.params, snapshot.values):
            p.values = values
        self.state = replace(snapshot.state, lr=lr)


@dataclass(frozen=True)
class AdamSnapshot:
    values: List[np.ndarray]
    state: AdamState


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    if not max_norm > 0:
        raise UsageError(f"max_norm must be positive, got {max_norm}")
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(np.sum([np.sum(g * g) for g in grads]))) if grads else 0.0
    if not math.isfinite(total):
        raise NonFiniteError(f"gradient norm is not finite ({total})", op="clip_grad_norm")
    if total > max_norm:
        factor = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return total


def lr_schedule(epoch: int, base_lr: float, decay: float, every: int = 1) -> float:
    """Step decay: ``base_lr * decay ** (epoch // every)``."""
    if epoch < 0:
        raise UsageError(f"epoch must be non-negative, got {epoch}")
    if not 0.0 < decay <= 1.0:
        raise UsageError(f"decay must lie in (0, 1], got {decay}")
    if every < 1:
        raise UsageError(f"every must be positive, got {every}")
    return base_lr * decay ** (epoch // every)
