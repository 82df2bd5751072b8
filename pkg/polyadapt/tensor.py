"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a row-major ``numpy`` array.  Every differentiable
operation is a :class:`Function` subclass whose ``apply`` records the inputs
on the output tensor; :func:`backward` walks that record in reverse
topological order and accumulates gradients on the leaves.

Shapes are strict: apart from adding (or multiplying) a 1-D tensor over the
last axis, operands must have identical shapes.  Reductions always run in a
fixed order so that repeated runs with one seed are bit-identical.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Any, Iterable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, UsageError

DEFAULT_DTYPE = np.float32
FLOAT_DTYPES = (np.float32, np.float64)

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _as_float_array(data: Any, dtype: Any) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES:
        return data
    return np.asarray(data, dtype=DEFAULT_DTYPE)


class Tensor:
    """Dense array with an optional gradient buffer."""

    def __init__(
        self,
        data: Any,
        *,
        requires_grad: bool = False,
        dtype: Any = None,
        _ctx: "Function | None" = None,
    ) -> None:
        self.data = _as_float_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._ctx = _ctx

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


class Parameter(Tensor):
    """Leaf tensor owned by a module; trainable unless frozen."""

    def __init__(self, data: Any, *, dtype: Any = None, requires_grad: bool = True) -> None:
        super().__init__(np.array(data, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


class Function:
    """A recorded differentiable operation.

    Subclasses implement ``forward`` on raw arrays and ``backward`` mapping
    the output gradient to one gradient (or ``None``) per input.
    """

    def __init__(self, *inputs: Tensor) -> None:
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
        return Tensor(out, dtype=out.dtype, requires_grad=requires_grad, _ctx=fn if requires_grad else None)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in reversed(node._ctx.inputs):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, inputs: Iterable[Tensor] = ()) -> set[Tensor]:
    """Populate ``grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate into existing leaf buffers, which is what gradient
    accumulation over micro-batches relies on. Leaves that get no
    contribution, including any of ``inputs`` the loss never used, end with a
    zero gradient. Returns the leaves that did receive a contribution.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    order = _topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: set[Tensor] = set()
    for node in reversed(order):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node._ctx is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            touched.add(node)
            continue
        for parent, parent_grad in zip(node._ctx.inputs, node._ctx.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
    for leaf in itertools.chain((n for n in order if n._ctx is None), inputs):
        if leaf.requires_grad and leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    return touched


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------

def _bias_compatible(a: np.ndarray, b: np.ndarray) -> bool:
    return b.ndim == 1 and a.ndim >= 1 and a.shape[-1:] == b.shape


def _reduce_to_bias(grad: np.ndarray) -> np.ndarray:
    return grad.reshape(-1, grad.shape[-1]).sum(axis=0)


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.shape != b.shape and not _bias_compatible(a, b):
            raise DimensionError(f"add shape mismatch: {a.shape} and {b.shape}")
        return a + b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.inputs
        return grad, grad if b.shape == grad.shape else _reduce_to_bias(grad)


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.shape != b.shape and not _bias_compatible(a, b):
            raise DimensionError(f"mul shape mismatch: {a.shape} and {b.shape}")
        return a * b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.inputs
        grad_b = grad * a.data
        if b.shape != grad.shape:
            grad_b = _reduce_to_bias(grad_b)
        return grad * b.data, grad_b


class Scale(Function):
    def forward(self, x: np.ndarray, *, factor: float) -> np.ndarray:
        self.factor = factor
        return x * x.dtype.type(factor)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * grad.dtype.type(self.factor),)


class MatMul(Function):
    """``a @ b`` for a 2-D right operand or equal leading batch dimensions."""

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if b.ndim == 2 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
            self.weight_form = True
        elif a.ndim == b.ndim > 2 and a.shape[:-2] == b.shape[:-2] and a.shape[-1] == b.shape[-2]:
            self.weight_form = False
        else:
            raise DimensionError(f"matmul shape mismatch: {a.shape} and {b.shape}")
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.inputs
        if self.weight_form:
            grad_a = np.matmul(grad, b.data.T)
            flat_a = a.data.reshape(-1, a.shape[-1])
            grad_b = np.matmul(flat_a.T, grad.reshape(-1, grad.shape[-1]))
            return grad_a, grad_b
        grad_a = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return grad_a, grad_b


class Transpose(Function):
    def forward(self, x: np.ndarray, *, axes: Sequence[int]) -> np.ndarray:
        self.axes = tuple(axes)
        return np.ascontiguousarray(np.transpose(x, self.axes))

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.transpose(grad, np.argsort(self.axes)),)


class Reshape(Function):
    def forward(self, x: np.ndarray, *, shape: Sequence[int]) -> np.ndarray:
        self.in_shape = x.shape
        try:
            return x.reshape(tuple(shape))
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad.reshape(self.in_shape),)


class Sum(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x.sum(), dtype=x.dtype)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        (x,) = self.inputs
        return (np.full(x.shape, grad, dtype=x.dtype),)


class Gather(Function):
    """Rows of a 2-D table selected by an integer index array of any shape."""

    def forward(self, table: np.ndarray, *, index: np.ndarray) -> np.ndarray:
        if table.ndim != 2:
            raise DimensionError(f"gather needs a 2-D table, got {table.shape}")
        self.index = np.asarray(index, dtype=np.int64)
        if self.index.size and (self.index.min() < 0 or self.index.max() >= table.shape[0]):
            raise DimensionError(f"gather index out of range for table with {table.shape[0]} rows")
        return table[self.index]

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        (table,) = self.inputs
        out = np.zeros_like(table.data)
        np.add.at(out, self.index.reshape(-1), grad.reshape(-1, table.shape[1]))
        return (out,)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, Scale.apply(b, factor=-1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale.apply(x, factor=float(factor))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; backward is ``dA = dY·Bᵀ``, ``dB = Aᵀ·dY``."""
    return MatMul.apply(a, b)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    return Transpose.apply(x, axes=axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=shape)


def tensor_sum(x: Tensor) -> Tensor:
    return Sum.apply(x)


def mean(x: Tensor) -> Tensor:
    return scale(Sum.apply(x), 1.0 / max(x.data.size, 1))


def gather(table: Tensor, index: np.ndarray) -> Tensor:
    return Gather.apply(table, index=index)


def constant(data: Any, dtype: Any = None) -> Tensor:
    return Tensor(data, dtype=dtype)
