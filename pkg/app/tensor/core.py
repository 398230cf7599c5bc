"""Tensor type and the reverse-mode automatic differentiation engine."""

import logging
import threading
from contextlib import contextmanager
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.errors import ShapeError

# Configure logging
logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    """Whether executed primitives are currently recorded for backward."""
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording inside the block (evaluation, example generation)."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Function:
    """
    Base class for differentiable primitives.

    Subclasses implement `forward` on numpy arrays and `backward`, which maps
    the gradient of the output to one gradient per tensor input (or None for
    inputs that need no gradient).
    """

    name = "function"

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{self.name}: forward not implemented")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{self.name}: backward not implemented")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        """
        Run the primitive and, when any input requires grad, record it.

        Args:
            *tensors: Tensor operands
            **kwargs: Non-differentiable primitive arguments

        Returns:
            Output tensor referencing this function as its creator
        """
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in tensors)
        return Tensor(out_data, requires_grad=requires_grad, _creator=func if requires_grad else None)

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        """Sum out broadcast dimensions so that grad matches shape."""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


class Tensor:
    """
    Dense n-dimensional array that optionally participates in the tape.

    The value is never modified after construction; only `grad` changes.
    Floating-point inputs keep their precision (float32 or float64); anything
    else is converted to DEFAULT_DTYPE.
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Optional[np.dtype] = None,
        _creator: Optional[Function] = None,
    ):
        array = np.asarray(data)
        if dtype is not None:
            array = array.astype(dtype, copy=False)
        elif array.dtype not in (np.float32, np.float64):
            array = array.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = np.ascontiguousarray(array)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.creator = _creator

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.creator is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar; primitives live in app.tensor.ops
    def _lift(self, other: Any) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other: Any) -> "Tensor":
        from app.tensor import ops
        return ops.add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        from app.tensor import ops
        return ops.add(self, ops.neg(self._lift(other)))

    def __rsub__(self, other: Any) -> "Tensor":
        from app.tensor import ops
        return ops.add(self._lift(other), ops.neg(self))

    def __mul__(self, other: Any) -> "Tensor":
        from app.tensor import ops
        return ops.mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        from app.tensor import ops
        return ops.neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from app.tensor import ops
        return ops.matmul(self, other)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        from app.tensor import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        from app.tensor import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        from app.tensor import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def _topological_order(root: Tensor) -> List[Tensor]:
    """Nodes reachable from root, each input before its consumers."""
    order: List[Tensor] = []
    visited = set()
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
        if node.creator is not None:
            for parent in reversed(node.creator.tensors):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, inputs: Optional[Iterable[Tensor]] = None) -> None:
    """
    Populate `.grad` of the requires_grad leaves reachable from a scalar loss.

    Gradients accumulate: calling backward twice without resetting the
    leaves' grads adds the second gradient onto the first. When `inputs` is
    given, only those leaves receive a gradient.

    Args:
        loss: Scalar tensor produced by recorded primitives
        inputs: Optional subset of leaves to populate

    Raises:
        ShapeError: If the loss is not a scalar
        ValueError: If nothing was recorded for the loss
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor that requires grad")

    targets = None if inputs is None else {id(t) for t in inputs}
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    for node in reversed(_topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.creator is None:
            if node.requires_grad and (targets is None or id(node) in targets):
                node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        parent_grads = node.creator.backward(grad)
        for parent, parent_grad in zip(node.creator.tensors, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent_grad.shape != parent.shape:
                raise ShapeError(
                    f"{node.creator.name}: gradient shape {parent_grad.shape} "
                    f"does not match input shape {parent.shape}"
                )
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


def input_gradient(loss_fn: Callable[[Tensor], Tensor], x: Tensor) -> Tensor:
    """
    Gradient of a closure's scalar loss with respect to its input.

    Parameter gradients are not touched: only `x` is populated during the
    backward pass, and x's own grad store is restored afterwards.

    Args:
        loss_fn: Closure evaluating the full loss at x
        x: Input tensor marked requires_grad

    Returns:
        Tensor holding dL/dx with x's shape
    """
    if not x.requires_grad:
        raise ValueError("input_gradient: x must be marked requires_grad")
    previous = x.grad
    x.grad = None
    try:
        loss = loss_fn(x)
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
            raise ShapeError(f"input_gradient: closure must return a scalar tensor, got {shape}")
        backward(loss, inputs=(x,))
        grad = x.grad if x.grad is not None else np.zeros_like(x.data)
    finally:
        x.grad = previous
    return Tensor(grad)
