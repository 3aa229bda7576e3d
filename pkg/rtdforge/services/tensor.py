"""
Dense tensors with reverse-mode automatic differentiation.

Every operation on tensors that require gradients records a node on the
gradient tape. ``backward(loss)`` walks the recorded nodes reachable from the
loss in exact reverse order of construction and accumulates gradients into
every reachable tensor that requires them.
"""
import itertools
import logging
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger('rtdforge')

_default_dtype: ContextVar[type] = ContextVar('rtdforge_default_dtype', default=np.float32)
_grad_enabled: ContextVar[bool] = ContextVar('rtdforge_grad_enabled', default=True)
_node_counter = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TokenIndexError(IndexError):
    """An id addresses a row outside an embedding table or vocabulary."""


class LossError(ValueError):
    """A loss was requested over an empty set of positions."""


class BackwardError(RuntimeError):
    """backward() was called on something that is not a taped scalar."""


@contextmanager
def precision(dtype):
    """Switch the default floating dtype (float32 or float64) for new tensors."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported precision {dtype}; use float32 or float64")
    token = _default_dtype.set(dtype.type)
    try:
        yield
    finally:
        _default_dtype.reset(token)


def get_default_dtype() -> type:
    return _default_dtype.get()


@contextmanager
def no_grad():
    """Run a block without recording anything on the tape (evaluation mode)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


@dataclass(eq=False)
class Node:
    """One executed operation: maps the output gradient to input gradients."""
    index: int
    op: str
    inputs: tuple['Tensor', ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """
    n-dimensional array with optional participation in the gradient tape.

    ``grad`` is only ever allocated for tensors with ``requires_grad=True``
    and always has the same shape as ``data``.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = _default_dtype.get()
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ''
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    @property
    def shape(self) -> tuple[int, ...]:
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
    def T(self) -> 'Tensor':
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Tensor':
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if grad.shape != self.shape:
            raise ShapeError(f"Gradient shape {grad.shape} does not match tensor shape {self.shape}")
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.dtype, copy=True)
        else:
            self.grad += grad

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_lift(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> 'Tensor':
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return reduce_mean(self, axis, keepdims)

    def exp(self) -> 'Tensor':
        return exp(self)

    def log(self) -> 'Tensor':
        return log(self)


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value), dtype=like.dtype)


def record(data: np.ndarray, inputs: Iterable[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap an op result and put a node on the tape when any input needs grads."""
    inputs = tuple(inputs)
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled.get() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(next(_node_counter), op, inputs, backward_fn)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return record(a.data + b.data, (a, b), backward, 'add')


def sub(a: Tensor, b) -> Tensor:
    b = _lift(b, a)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return record(a.data - b.data, (a, b), backward, 'sub')


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return record(a.data * b.data, (a, b), backward, 'mul')


def div(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    out = a.data / b.data

    def backward(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return record(out, (a, b), backward, 'div')


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return record(a.data ** exponent, (a,), backward, 'pow')


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), 'exp')


def log(a: Tensor) -> Tensor:
    return record(np.log(a.data), (a,), lambda g: (g / a.data,), 'log')


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}") from e

    def backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)

    return record(out, (a, b), backward, 'matmul')


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return record(np.asarray(out), (a,), backward, 'sum')


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return reduce_sum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return record(out, (a,), lambda g: (g.reshape(a.shape),), 'reshape')


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return record(out, (a,), lambda g: (np.transpose(g, inverse),), 'transpose')


def getitem(a: Tensor, key) -> Tensor:
    if isinstance(key, np.ndarray) and key.dtype == bool:
        key = np.nonzero(key)
    out = a.data[key]

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, key, g)
        return (grad,)

    return record(np.array(out, copy=True), (a,), backward, 'getitem')


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(out, tensors, backward, 'concatenate')


@dataclass
class Tape:
    """
    The recorded operations reachable from one output, ordered for reverse traversal.

    ``entries`` holds the taped tensors sorted by node index, newest first, so
    every consumer is processed before the tensors it consumed.
    """
    entries: list[Tensor] = field(default_factory=list)

    @classmethod
    def collect(cls, output: Tensor) -> 'Tape':
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [output]
        while stack:
            tensor = stack.pop()
            if id(tensor) in seen:
                continue
            seen.add(id(tensor))
            if tensor._node is None:
                continue
            found.append(tensor)
            stack.extend(t for t in tensor._node.inputs if t.requires_grad)
        found.sort(key=lambda t: t._node.index, reverse=True)
        return cls(found)

    def run(self, output: Tensor, seed: np.ndarray) -> None:
        pending: dict[int, np.ndarray] = {id(output): seed}
        leaves: dict[int, Tensor] = {}
        for tensor in self.entries:
            grad = pending.pop(id(tensor), None)
            if grad is None:
                continue
            tensor.accumulate_grad(grad)
            input_grads = tensor._node.backward_fn(grad)
            for parent, parent_grad in zip(tensor._node.inputs, input_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad
                if parent._node is None:
                    leaves[key] = parent
        for key, leaf in leaves.items():
            if key in pending:
                leaf.accumulate_grad(pending.pop(key))
        if id(output) in pending and output._node is None:
            output.accumulate_grad(pending.pop(id(output)))


def backward(loss: Tensor) -> None:
    """
    Populate ``grad`` on every tensor reachable from a scalar loss.

    Repeated calls without resetting grads accumulate.
    """
    if loss.size != 1:
        raise BackwardError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise BackwardError("Loss is not attached to a gradient tape")
    Tape.collect(loss).run(loss, np.ones_like(loss.data))
