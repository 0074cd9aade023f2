"""
Reverse-mode differentiation over dense float64 arrays.

Every operation runs eagerly on numpy arrays. While a Tape is active
(``with Tape() as tape:``) each operation that consumes a tensor with
``requires_grad`` is appended to the tape together with a closure that maps
the output gradient to input gradients. ``tape.backward(loss)`` replays the
record in reverse and accumulates into the ``grad`` buffers of leaf tensors.

The active tape is thread-local, so independent tapes can be driven from
separate threads. ``detach`` and ``no_grad`` produce values that the tape
never sees.
"""

import itertools
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, DomainError


logger = logging.getLogger(__name__)

_node_ids = itertools.count()
_local = threading.local()

Operand = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """
    A float64 array with an optional gradient buffer.

    Leaf tensors created with ``requires_grad=True`` own a zero-initialised
    ``grad`` buffer that backward passes accumulate into. Tensors produced by
    recorded operations receive their gradient on backward as well.
    """

    __slots__ = ("values", "grad", "requires_grad", "node_id", "name", "_leaf")

    def __init__(self, values: Operand, requires_grad: bool = False, name: str = ""):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = np.zeros_like(self.values) if requires_grad else None
        self.node_id = next(_node_ids)
        self.name = name
        self._leaf = True

    @classmethod
    def _from_op(cls, values: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.values = values
        out.requires_grad = requires_grad
        out.grad = None
        out.node_id = next(_node_ids)
        out.name = ""
        out._leaf = False
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return div(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass(frozen=True)
class TapeEntry:
    """One recorded operation: inputs, output and the gradient closure."""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """
    Ordered record of operations for one backward pass.

    Entries are appended in execution order, so every entry's inputs were
    produced earlier (or are leaves). Use as a context manager to make the
    tape active for the current thread.
    """

    def __init__(self):
        self._entries: List[TapeEntry] = []
        self._outputs: set = set()

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> Tuple[TapeEntry, ...]:
        return tuple(self._entries)

    def _append(self, entry: TapeEntry) -> None:
        self._entries.append(entry)
        self._outputs.add(entry.output.node_id)

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def backward(self, loss: Tensor) -> None:
        """
        Accumulate d(loss)/d(tensor) into every reachable tensor with requires_grad.

        Leaf gradients are added to, never overwritten; tensors that loss does
        not depend on keep their buffers untouched.
        """
        if loss.values.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            logger.debug("backward on a constant loss; nothing to do")
            return

        seed = np.ones_like(loss.values)
        if loss._leaf:
            loss.grad = seed if loss.grad is None else loss.grad + seed
            return
        if loss.node_id not in self._outputs:
            raise ContractError("loss was not recorded on this tape")

        pending = {loss.node_id: seed}
        for entry in reversed(self._entries):
            upstream = pending.pop(entry.output.node_id, None)
            if upstream is None:
                continue
            entry.output.grad = upstream
            for tensor, grad in zip(entry.inputs, entry.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor._leaf:
                    if tensor.grad is None:
                        tensor.grad = np.zeros_like(tensor.values)
                    tensor.grad += grad
                else:
                    previous = pending.get(tensor.node_id)
                    pending[tensor.node_id] = grad if previous is None else previous + grad


def backward(loss: Tensor, tape: Tape) -> None:
    """Run ``tape.backward(loss)``."""
    tape.backward(loss)


def _tape_stack() -> List[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional[Tape]:
    if getattr(_local, "paused", 0):
        return None
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on the current thread."""
    _local.paused = getattr(_local, "paused", 0) + 1
    try:
        yield
    finally:
        _local.paused -= 1


def as_tensor(value: Operand) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(op: str, inputs: Sequence[Tensor], values: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._from_op(values, requires_grad=track)
    if track:
        tape._append(TapeEntry(op, tuple(inputs), out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ============================================================================
# LINEAR ALGEBRA
# ============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of an m×k and a k×n tensor.

    Either operand may carry one leading batch axis (S×m×k, S×k×n); a 2-D
    operand is shared across the batch and its gradient is summed over it.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim not in (2, 3) or b.values.ndim not in (2, 3) or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.values.ndim == b.values.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul: batch sizes differ in {a.shape} and {b.shape}")
    av, bv = a.values, b.values

    def _backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _record("matmul", (a, b), av @ bv, _backward)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes of a matrix or a batch of matrices."""
    x = as_tensor(x)
    if x.values.ndim not in (2, 3):
        raise DimensionError(f"transpose needs a matrix, got {x.shape}")
    values = np.swapaxes(x.values, -1, -2).copy()
    return _record("transpose", (x,), values, lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        values = x.values.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    original = x.shape
    return _record("reshape", (x,), values, lambda g: (g.reshape(original),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join tensors along an existing axis."""
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise DomainError("concat of no tensors")
    try:
        values = np.concatenate([p.values for p in parts], axis=axis)
    except ValueError:
        shapes = [p.shape for p in parts]
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    cuts = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def _backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record("concat", parts, values, _backward)


def index_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows (entries along axis 0); repeated indices accumulate gradient."""
    x = as_tensor(x)
    if x.values.ndim == 0:
        raise DimensionError("index_rows needs at least one axis")
    picked = np.asarray(indices, dtype=np.int64)
    if picked.size and (picked.min() < -x.shape[0] or picked.max() >= x.shape[0]):
        raise DimensionError(f"index_rows: indices out of range for {x.shape}")
    shape = x.shape

    def _backward(g):
        grad = np.zeros(shape)
        np.add.at(grad, picked, g)
        return (grad,)

    return _record("index_rows", (x,), x.values[picked], _backward)


# ============================================================================
# ELEMENTWISE
# ============================================================================

def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape

    def _backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record("add", (a, b), a.values + b.values, _backward)


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape

    def _backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _record("sub", (a, b), a.values - b.values, _backward)


def mul(a: Operand, b: Operand) -> Tensor:
    """Hadamard product."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    av, bv = a.values, b.values

    def _backward(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _record("mul", (a, b), av * bv, _backward)


def div(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    if np.any(b.values == 0.0):
        raise DomainError("div: division by zero")
    av, bv = a.values, b.values

    def _backward(g):
        return _unbroadcast(g / bv, av.shape), _unbroadcast(-g * av / (bv * bv), bv.shape)

    return _record("div", (a, b), av / bv, _backward)


def scale(x: Operand, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)
    return _record("scale", (x,), x.values * factor, lambda g: (g * factor,))


def neg(x: Operand) -> Tensor:
    return scale(x, -1.0)


def relu(x: Operand) -> Tensor:
    x = as_tensor(x)
    mask = x.values > 0
    return _record("relu", (x,), np.where(mask, x.values, 0.0), lambda g: (g * mask,))


def sigmoid(x: Operand) -> Tensor:
    x = as_tensor(x)
    y = expit(x.values)
    return _record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def log(x: Operand) -> Tensor:
    x = as_tensor(x)
    if np.any(x.values <= 0.0):
        raise DomainError("log: input must be strictly positive")
    xv = x.values
    return _record("log", (x,), np.log(xv), lambda g: (g / xv,))


def exp(x: Operand) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.values)
    return _record("exp", (x,), y, lambda g: (g * y,))


def sqrt(x: Operand) -> Tensor:
    x = as_tensor(x)
    if np.any(x.values <= 0.0):
        raise DomainError("sqrt: input must be strictly positive")
    y = np.sqrt(x.values)
    return _record("sqrt", (x,), y, lambda g: (g / (2.0 * y),))


def clip(x: Operand, low: float, high: float) -> Tensor:
    """Clamp into [low, high]; gradient passes only where the input was inside."""
    x = as_tensor(x)
    inside = (x.values >= low) & (x.values <= high)
    return _record("clip", (x,), np.clip(x.values, low, high), lambda g: (g * inside,))


# ============================================================================
# REDUCTIONS
# ============================================================================

def sum(x: Operand, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def _backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record("sum", (x,), np.asarray(x.values.sum(axis=axis)), _backward)


def mean(x: Operand, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    if count == 0:
        raise DomainError("mean of an empty tensor")
    return scale(sum(x, axis=axis), 1.0 / count)


def l2_norm(x: Operand) -> Tensor:
    """Euclidean norm of all entries; the subgradient at zero is zero."""
    x = as_tensor(x)
    xv = x.values
    norm = float(np.sqrt(np.sum(xv * xv)))

    def _backward(g):
        if norm == 0.0:
            return (np.zeros_like(xv),)
        return (g * xv / norm,)

    return _record("l2_norm", (x,), np.asarray(norm), _backward)


def softmax(x: Operand, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction."""
    x = as_tensor(x)
    if x.size == 0 or x.values.ndim == 0 or x.shape[axis] == 0:
        raise DomainError("softmax of an empty tensor")
    shifted = x.values - np.max(x.values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def _backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _record("softmax", (x,), y, _backward)


def softmax_values(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-array softmax, for detached scores."""
    return softmax(Tensor(values), axis=axis).values


def detach(x: Operand) -> Tensor:
    """Value-identical copy that no gradient flows through."""
    x = as_tensor(x)
    return Tensor._from_op(x.values.copy(), requires_grad=False)


# ============================================================================
# GRADIENT CHECKING
# ============================================================================

def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` w.r.t. every entry of ``tensor``."""
    grad = np.zeros_like(tensor.values)
    flat = tensor.values.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            upper = fn().item()
            flat[i] = original - step
            lower = fn().item()
            flat[i] = original
            out[i] = (upper - lower) / (2.0 * step)
    return grad


def gradcheck(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = 1e-6,
    floor: float = 1e-8,
) -> float:
    """
    Compare analytic gradients of ``fn()`` with central differences.

    Returns the worst relative error |analytic - numeric| / max(|analytic|, |numeric|, floor)
    over all entries of ``tensors``. Existing gradient buffers are reset.
    """
    for tensor in tensors:
        tensor.grad = np.zeros_like(tensor.values)
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)

    worst = 0.0
    for tensor in tensors:
        analytic = tensor.grad.copy()
        numeric = numerical_gradient(fn, tensor, step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        if denom.size:
            worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
