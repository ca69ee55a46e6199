"""
FlowAug - Tensor and Reverse-Mode Differentiation
Dense 64-bit tensors with a dynamic tape for gradients

Features:
- Tensor: immutable float64 array that remembers the operation producing it
- Parameter: named, mutable leaf tensor carrying a gradient buffer
- gradient(): reverse sweep over the recorded graph in topological order
- no_grad(): context manager that disables recording (inference, inverses)
- Every produced value is checked for NaN/Inf and raises NonFiniteError
"""

import contextlib
import logging
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from engine.errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """
    Dense float64 tensor node

    Layout is row-major; 4-D activations are (batch, height, width, channels).
    A Tensor created while recording is enabled keeps references to its
    parents and a closure mapping the output gradient to parent gradients.
    """

    __slots__ = ("data", "_parents", "_backward", "op")

    def __init__(
        self,
        data: ArrayLike,
        parents: Tuple["Tensor", ...] = (),
        backward: Optional[BackwardFn] = None,
        op: str = "",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self._parents = parents
        self._backward = backward
        self.op = op

    # ---- construction helpers -------------------------------------------------

    @staticmethod
    def make(data: np.ndarray, parents: Tuple["Tensor", ...], backward: BackwardFn, op: str) -> "Tensor":
        """Wrap an op result, checking finiteness and recording it on the tape."""
        data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"operation '{op}' produced non-finite values (shape {data.shape})")
        if _grad_enabled:
            return Tensor(data, parents, backward, op)
        return Tensor(data, op=op)

    # ---- introspection --------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op='{self.op}')"

    # ---- elementwise arithmetic -----------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor.make(self.data + other.data, (self, other), backward, "add")

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor.make(self.data - other.data, (self, other), backward, "sub")

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor.make(a * b, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor.make(a / b, (self, other), backward, "div")

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor.make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self.data

        def backward(g):
            return (g * exponent * a ** (exponent - 1),)

        return Tensor.make(a**exponent, (self,), backward, "pow")

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        from engine.ops import matmul

        return matmul(self, other)

    # ---- unary functions ------------------------------------------------------

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor.make(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self.data
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(a)
        return Tensor.make(out, (self,), lambda g: (g / a,), "log")

    def abs(self) -> "Tensor":
        a = self.data
        return Tensor.make(np.abs(a), (self,), lambda g: (g * np.sign(a),), "abs")

    def relu(self) -> "Tensor":
        mask = self.data > 0  # derivative at exactly 0 is 0
        return Tensor.make(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    def sigmoid(self) -> "Tensor":
        out = _stable_sigmoid(self.data)
        return Tensor.make(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def log_sigmoid(self) -> "Tensor":
        a = self.data
        out = -np.logaddexp(0.0, -a)
        return Tensor.make(out, (self,), lambda g: (g * _stable_sigmoid(-a),), "log_sigmoid")

    # ---- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        axes = _normalize_axes(axis, self.ndim)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor.make(self.data.sum(axis=axes, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _normalize_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        if count == 0:
            raise ShapeError(f"mean over empty axes {axes} of shape {self.shape}")
        return self.sum(axis=axes, keepdims=keepdims) * (1.0 / count)

    # ---- shape manipulation ---------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return Tensor.make(self.data.reshape(shape), (self,), lambda g: (g.reshape(original),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor.make(np.transpose(self.data, axes), (self,), lambda g: (np.transpose(g, inverse),), "transpose")

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return Tensor.make(self.data[index], (self,), backward, "slice")


class Parameter(Tensor):
    """
    Trainable leaf tensor

    Args:
        value: initial value
        name: unique path within a model, e.g. "level0/step2/actnorm/scale"
    """

    __slots__ = ("name", "grad")

    def __init__(self, value: ArrayLike, name: str):
        super().__init__(np.array(value, dtype=np.float64, copy=True), op="parameter")
        self.name = name
        self.grad = np.zeros_like(self.data)

    def assign(self, value: ArrayLike) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise ShapeError(f"cannot assign shape {value.shape} to parameter '{self.name}' of shape {self.data.shape}")
        self.data[...] = value

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter(name='{self.name}', shape={self.shape})"


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _normalize_axes(axis, ndim: int) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _stable_sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    positive = a >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-a[positive]))
    e = np.exp(a[~positive])
    out[~positive] = e / (1.0 + e)
    return out


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
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
    return order


def gradient(loss: Tensor, parameters: Iterable[Parameter]) -> None:
    """
    Populate `Parameter.grad` with d(loss)/d(parameter)

    Parameters that the loss does not depend on receive an all-zero gradient.

    Args:
        loss: scalar tensor recorded with grad enabled
        parameters: parameters whose gradients should be written
    """
    if loss.size != 1:
        raise ShapeError(f"gradient() needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        upstream = grads.get(id(node))
        if upstream is None or node._backward is None:
            continue
        for parent, parent_grad in zip(node._parents, node._backward(upstream)):
            if parent_grad is None:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad
    for parameter in parameters:
        g = grads.get(id(parameter))
        if g is None:
            parameter.grad = np.zeros_like(parameter.data)
        else:
            parameter.grad = np.array(g, dtype=np.float64).reshape(parameter.shape)
