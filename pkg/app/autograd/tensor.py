"""
Tensor and differentiation tape.

A ``Tensor`` wraps a numpy array. Tensors produced by a ``Function`` while any
input requires gradients keep a reference to that function; ``backward`` walks
the resulting graph in reverse topological order (the ``Tape``) and
accumulates gradients into leaf tensors that require them.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Any, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

logger = structlog.get_logger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]

_SUPPORTED_DTYPES = {"float32": np.float32, "float64": np.float64}
_context = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an operation's contract."""


class GradientError(RuntimeError):
    """Raised when backward is requested on something that is not on a tape."""


class NonFiniteError(ArithmeticError):
    """Raised when a gradient or loss contains NaN or infinity."""

    def __init__(self, message: str, name: Optional[str] = None):
        super().__init__(message)
        self.name = name


def default_dtype() -> np.dtype:
    """Floating point type used for new leaf tensors in this thread."""
    return np.dtype(getattr(_context, "dtype", np.float32))


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Switch leaf tensor precision, e.g. ``with precision("float64"):`` for gradient checks."""
    if name not in _SUPPORTED_DTYPES:
        raise ValueError(f"unsupported precision {name!r}, expected one of {sorted(_SUPPORTED_DTYPES)}")
    previous = getattr(_context, "dtype", np.float32)
    _context.dtype = _SUPPORTED_DTYPES[name]
    try:
        yield
    finally:
        _context.dtype = previous


def grad_enabled() -> bool:
    return getattr(_context, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them, e.g. for evaluation and decoding."""
    previous = grad_enabled()
    _context.grad_enabled = False
    try:
        yield
    finally:
        _context.grad_enabled = previous


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement ``forward`` over raw arrays and ``backward``, which
    receives dL/d(output) and returns one gradient (or None) per tensor input.
    ``needs_grad`` tells ``backward`` which input gradients are worth computing.
    """

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs
        self.needs_grad = tuple(t.requires_grad for t in inputs)

    @property
    def op_name(self) -> str:
        return type(self).__name__.lower()

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        if any(fn.needs_grad) and grad_enabled():
            return Tensor(out, requires_grad=True, creator=fn)
        return Tensor(out)


class Tensor:
    """Shape-carrying array that can take part in reverse-mode differentiation."""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        creator: Optional[Function] = None,
        name: Optional[str] = None,
    ):
        array = np.asarray(data)
        if creator is None and array.dtype != default_dtype():
            array = array.astype(default_dtype())
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.creator = creator
        self.name = name
        self._grad: Optional[np.ndarray] = None

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self._grad

    @grad.setter
    def grad(self, value: Optional[np.ndarray]) -> None:
        if value is None:
            self._grad = None
            return
        if not self.requires_grad:
            raise GradientError(f"tensor {self.name or ''} does not require gradients")
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ShapeError(f"gradient shape {value.shape} does not match value shape {self.data.shape}")
        self._grad = value

    def accumulate_grad(self, value: np.ndarray) -> None:
        value = unbroadcast(np.asarray(value), self.data.shape)
        if self._grad is None:
            self.grad = value.copy()
        else:
            self._grad = self._grad + value

    def zero_grad(self) -> None:
        self._grad = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.creator is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> "Tape":
        """Propagate gradients from this scalar into every leaf that requires them."""
        if not self.requires_grad:
            raise GradientError("backward called on a tensor that is not part of a differentiation graph")
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.shape}")
        tape = Tape.record(self)
        tape.run(self)
        return tape

    # Arithmetic sugar delegates to the functional module.
    def __add__(self, other: Union["Tensor", float]) -> "Tensor":
        from . import functional as F

        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Union["Tensor", float]) -> "Tensor":
        from . import functional as F

        return F.add(self, F.mul(other, -1.0))

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        from . import functional as F

        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        from . import functional as F

        return F.mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from . import functional as F

        return F.matmul(self, other)

    def reshape(self, *shape: int) -> "Tensor":
        from . import functional as F

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        from . import functional as F

        return F.transpose(self, axes)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        from . import functional as F

        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        from . import functional as F

        return F.mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


@dataclass
class TapeNode:
    op: str
    parents: Tuple[int, ...]
    tensor: Tensor


@dataclass
class Tape:
    """Topologically ordered record of a graph: every parent id precedes its children."""

    nodes: List[TapeNode] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        index: dict = {}
        order: List[Tensor] = []
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        # Iterative post-order DFS; decoder graphs are deeper than the recursion limit.
        while stack:
            tensor, expanded = stack.pop()
            key = id(tensor)
            if key in index:
                continue
            if expanded or tensor.creator is None:
                index[key] = len(order)
                order.append(tensor)
                continue
            stack.append((tensor, True))
            for parent in reversed(tensor.creator.inputs):
                if parent.requires_grad and id(parent) not in index:
                    stack.append((parent, False))
        tape = cls()
        for tensor in order:
            if tensor.creator is None:
                tape.nodes.append(TapeNode("leaf", (), tensor))
            else:
                parents = tuple(index[id(p)] for p in tensor.creator.inputs if p.requires_grad)
                tape.nodes.append(TapeNode(tensor.creator.op_name, parents, tensor))
        return tape

    def run(self, root: Tensor) -> None:
        pending = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            tensor = node.tensor
            grad = pending.pop(id(tensor), None)
            if grad is None:
                continue
            if tensor.creator is None:
                tensor.accumulate_grad(grad)
                continue
            fn = tensor.creator
            input_grads = fn.backward(grad)
            for parent, needed, parent_grad in zip(fn.inputs, fn.needs_grad, input_grads):
                if not needed or parent_grad is None:
                    continue
                parent_grad = unbroadcast(parent_grad, parent.shape)
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad
