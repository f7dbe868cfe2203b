"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations in :mod:`gccpm.tensor.ops`
record the tensors they were computed from and a closure mapping the output
gradient to input gradients, which :func:`backward` replays in reverse
topological order.

Three context managers change how operations behave:

- :func:`precision` sets the floating point type new tensors are created with
  (``float32`` by default, ``float64`` for gradient checks).
- :func:`no_grad` stops operations from recording a graph.
- :func:`shape_only` makes operations skip arithmetic and return zero-storage
  placeholders of the right shape, used for complexity accounting.

:Example:

    >>> w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> loss = (w * w).sum()
    >>> backward(loss)
    >>> w.grad.tolist()
    [2.0, 4.0, 6.0]
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterator, Optional, Sequence, Union

import attrs
import numpy as np
import numpy.typing as npt

_DEFAULT_DTYPE: contextvars.ContextVar[np.dtype] = contextvars.ContextVar(
    "gccpm_default_dtype", default=np.dtype(np.float32)
)
_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "gccpm_grad_enabled", default=True
)
_SHAPE_ONLY: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "gccpm_shape_only", default=False
)

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def default_dtype() -> np.dtype:
    """The floating point type new tensors are created with."""
    return _DEFAULT_DTYPE.get()


@contextlib.contextmanager
def precision(dtype: npt.DTypeLike) -> Iterator[np.dtype]:
    """Create tensors in ``dtype`` inside the block

    >>> with precision("float64"):
    ...     Tensor([1, 2]).dtype
    dtype('float64')
    >>> Tensor([1, 2]).dtype
    dtype('float32')
    """
    dt = np.dtype(dtype)
    if dt not in SUPPORTED_DTYPES:
        raise ValueError(f"Unsupported precision {dt}, expected float32 or float64")
    token = _DEFAULT_DTYPE.set(dt)
    try:
        yield dt
    finally:
        _DEFAULT_DTYPE.reset(token)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Do not record operations inside the block."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def is_shape_only() -> bool:
    return _SHAPE_ONLY.get()


@contextlib.contextmanager
def shape_only() -> Iterator[None]:
    """Propagate shapes without computing values.

    Operations validate their arguments and return placeholders whose data is a
    read-only broadcast of a single zero, so a forward pass over a large network
    costs no arithmetic and no memory. Gradients are never recorded.
    """
    token = _SHAPE_ONLY.set(True)
    grad_token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(grad_token)
        _SHAPE_ONLY.reset(token)


def _as_array(value: npt.ArrayLike) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    if isinstance(value, np.ndarray) and value.dtype in SUPPORTED_DTYPES:
        return value
    return np.asarray(value, dtype=default_dtype())


@attrs.define(eq=False, repr=False)
class Tensor:
    """A dense array with an optional gradient buffer

    :param data: The values; anything numpy accepts. Arrays already in a
        supported float type keep their type, everything else is converted to
        :func:`default_dtype`.
    :param requires_grad: Whether :func:`backward` should populate ``grad``
    :param grad: Accumulated gradient, same shape as ``data``
    :param parents: Tensors this one was computed from (set by operations)
    :param backward_fn: Maps this tensor's gradient to its parents' gradients
    :param name: Optional label, used in diagnostics
    """

    data: np.ndarray = attrs.field(converter=_as_array)
    requires_grad: bool = attrs.field(default=False, kw_only=True)
    grad: Optional[np.ndarray] = attrs.field(default=None, kw_only=True)
    parents: tuple = attrs.field(default=(), kw_only=True, repr=False)
    backward_fn: Optional[BackwardFn] = attrs.field(
        default=None, kw_only=True, repr=False
    )
    name: str = attrs.field(default="", kw_only=True)

    @grad.validator
    def _check_grad(self, attribute, value):
        if value is not None and value.shape != self.data.shape:
            raise ValueError(
                f"grad shape {value.shape} does not match data shape {self.data.shape}"
            )

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"Tensor of shape {self.shape} is not a scalar")

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def detach(self) -> Tensor:
        return Tensor(self.data, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.data, dtype=dtype)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return (
            f"Tensor(shape={self.shape}, dtype={self.dtype}, "
            f"requires_grad={self.requires_grad}{label})"
        )

    # Operator sugar, the implementations live in ops
    def __add__(self, other: Union[Tensor, float]) -> Tensor:
        from gccpm.tensor import ops

        if isinstance(other, Tensor):
            return ops.add(self, other)
        return ops.add_scalar(self, float(other))

    __radd__ = __add__

    def __mul__(self, other: Union[Tensor, float]) -> Tensor:
        from gccpm.tensor import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return self * -1.0

    def __sub__(self, other: Union[Tensor, float]) -> Tensor:
        return self + (-other if isinstance(other, Tensor) else -float(other))

    def sum(self) -> Tensor:
        from gccpm.tensor import ops

        return ops.total(self)

    def relu(self) -> Tensor:
        from gccpm.tensor import ops

        return ops.relu(self)


def as_tensor(value: Union[Tensor, npt.ArrayLike]) -> Tensor:
    """Wrap ``value`` in a constant :class:`Tensor` unless it already is one."""
    return value if isinstance(value, Tensor) else Tensor(value)


def placeholder(shape: Sequence[int], dtype: Optional[npt.DTypeLike] = None) -> Tensor:
    """A zero-storage tensor of ``shape``, the result type of :func:`shape_only` operations.

    >>> placeholder((1, 1024, 32, 32)).shape
    (1, 1024, 32, 32)
    """
    dt = np.dtype(dtype) if dtype is not None else default_dtype()
    return Tensor(np.broadcast_to(np.zeros((), dtype=dt), tuple(shape)))


def record(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: BackwardFn,
) -> Tensor:
    """Create an operation result, attaching the graph only when needed."""
    requires = is_grad_enabled() and any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data)
    return Tensor(
        data, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn
    )


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
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor that requires it and leads to ``loss``

    Gradients accumulate into existing buffers; clear them with
    :meth:`Tensor.zero_grad` between steps.

    :param loss: A single element tensor
    :raises ValueError: If ``loss`` is not a scalar

    >>> x = Tensor([1.0, -2.0])
    >>> w = Tensor([3.0, 4.0], requires_grad=True)
    >>> backward((w * x).sum())
    >>> w.grad.tolist()
    [1.0, -2.0]
    >>> backward((w * x).sum())
    >>> w.grad.tolist()
    [2.0, -4.0]
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.requires_grad:
            node.grad = grad if node.grad is None else node.grad + grad
        if node.backward_fn is None:
            continue
        for parent, parent_grad in zip(node.parents, node.backward_fn(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad
