"""Dense float64 tensors with an explicit reverse-mode gradient trace.

A ``Tensor`` is an immutable wrapper around a read-only ``numpy.ndarray`` of
64-bit floats. Operations record themselves on a ``GradientTrace`` only when
one of their operands was produced under an active trace; the trace is always
passed explicitly through the tensors themselves, never through module state.

Typical use::

    with GradientTrace() as trace:
        x = trace.register(Tensor(values))
        loss = sum(square(x))
    grad = gradient(trace, loss, x)
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

from ..utils.validators import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    DivergenceUndefinedError,
    PreconditionError,
    UnknownInputError,
    validate_finite_array,
    validate_probability_vector,
)

Operand = Union["Tensor", np.ndarray, float, int, Sequence[Any]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(frozen=True)
class TraceNode:
    """One recorded primitive: which ids it consumed and how to pull gradients back."""

    op: str
    output: int
    parents: tuple[Optional[int], ...]
    backward: BackwardFn


class GradientTrace:
    """Append-only record of traced operations.

    A trace is single-owner: do not share one between threads. Independent
    traces may be used concurrently.
    """

    def __init__(self) -> None:
        """Initialize an empty, active trace."""
        self._nodes: list[TraceNode] = []
        self._inputs: dict[int, tuple[int, ...]] = {}
        self._ids = itertools.count()
        self.active = True

    def __enter__(self) -> "GradientTrace":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.active = False

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def nodes(self) -> tuple[TraceNode, ...]:
        """Recorded nodes in creation order."""
        return tuple(self._nodes)

    def register(self, tensor: "Tensor") -> "Tensor":
        """Register a tensor as a differentiable input of this trace.

        Args:
            tensor: Untraced tensor.

        Returns:
            A traced tensor sharing the same values.

        Raises:
            ContractError: If the trace is closed or the tensor is already traced.
        """
        if not self.active:
            raise ContractError("cannot register inputs on a closed trace")
        if tensor.trace is not None:
            raise ContractError("tensor is already part of a gradient trace")

        node_id = next(self._ids)
        self._inputs[node_id] = tensor.shape
        return Tensor._wrap(tensor.data, self, node_id)

    def is_input(self, tensor: "Tensor") -> bool:
        """Check whether a tensor was registered on this trace."""
        return tensor.trace is self and tensor.trace_id in self._inputs

    def _record(
        self,
        op: str,
        array: np.ndarray,
        operands: Sequence["Tensor"],
        backward: BackwardFn,
    ) -> "Tensor":
        node_id = next(self._ids)
        parents = tuple(t.trace_id if t.trace is self else None for t in operands)
        self._nodes.append(TraceNode(op=op, output=node_id, parents=parents, backward=backward))
        return Tensor._wrap(array, self, node_id, name=op)


class Tensor:
    """Immutable, shape-carrying array of 64-bit floats."""

    __slots__ = ("_data", "_trace", "_node")
    __array_priority__ = 1000

    def __init__(self, data: Operand) -> None:
        """Create a tensor, copying and validating the values.

        Args:
            data: Array-like of numbers.

        Raises:
            NonFiniteError: If any value is NaN or infinite.
        """
        if isinstance(data, Tensor):
            array = data.data
        else:
            array = np.array(data, dtype=np.float64)
        array = validate_finite_array(np.array(array, dtype=np.float64, copy=True))
        array.flags.writeable = False
        self._data = array
        self._trace: Optional[GradientTrace] = None
        self._node: Optional[int] = None

    @classmethod
    def _wrap(
        cls,
        array: np.ndarray,
        trace: Optional[GradientTrace] = None,
        node: Optional[int] = None,
        name: str = "tensor",
    ) -> "Tensor":
        array = np.asarray(array, dtype=np.float64)
        validate_finite_array(array, name)
        if array.flags.writeable:
            array = array.copy() if array.base is not None else array
            array.flags.writeable = False
        obj = cls.__new__(cls)
        obj._data = array
        obj._trace = trace
        obj._node = node
        return obj

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Tensor":
        """Create a tensor of zeros."""
        return cls._wrap(np.zeros(tuple(shape)))

    @classmethod
    def ones(cls, shape: Sequence[int]) -> "Tensor":
        """Create a tensor of ones."""
        return cls._wrap(np.ones(tuple(shape)))

    @classmethod
    def eye(cls, n: int) -> "Tensor":
        """Create an n x n identity matrix."""
        return cls._wrap(np.eye(n))

    @classmethod
    def from_flat(cls, shape: Sequence[int], data: Sequence[float]) -> "Tensor":
        """Create a tensor from a shape and a flat row-major buffer.

        Raises:
            DimensionError: If the buffer length does not match the shape.
        """
        shape = tuple(int(d) for d in shape)
        flat = np.asarray(data, dtype=np.float64).ravel()
        if math.prod(shape) != flat.size:
            raise DimensionError(
                f"shape {shape} needs {math.prod(shape)} values, got {flat.size}"
            )
        return cls(flat.reshape(shape))

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the values."""
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def trace(self) -> Optional[GradientTrace]:
        """Trace this tensor was produced under, if any."""
        return self._trace

    @property
    def trace_id(self) -> Optional[int]:
        """Handle of this tensor inside its trace."""
        return self._node

    def flat(self) -> np.ndarray:
        """Row-major copy of the values."""
        return self._data.ravel().copy()

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return self._data.copy()

    def detach(self) -> "Tensor":
        """Same values, no trace."""
        return Tensor._wrap(self._data)

    def item(self) -> float:
        """Value of a single-element tensor.

        Raises:
            ContractError: If the tensor has more than one element.
        """
        if self._data.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self._data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def __len__(self) -> int:
        if self.ndim == 0:
            raise TypeError("len() of a 0-d tensor")
        return self.shape[0]

    def __repr__(self) -> str:
        traced = f", trace_id={self._node}" if self._trace is not None else ""
        return f"Tensor(shape={self.shape}{traced})"

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

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: Operand) -> "Tensor":
        return matmul(self, other)


def as_tensor(value: Operand) -> Tensor:
    """Return value unchanged if it is a Tensor, else wrap it as a constant."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _active_trace(operands: Sequence[Tensor]) -> Optional[GradientTrace]:
    trace: Optional[GradientTrace] = None
    for t in operands:
        if t.trace is None or not t.trace.active:
            continue
        if trace is None:
            trace = t.trace
        elif t.trace is not trace:
            raise ContractError("operands belong to different gradient traces")
    return trace


def _emit(op: str, array: np.ndarray, operands: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    trace = _active_trace(operands)
    if trace is None:
        return Tensor._wrap(array, name=op)
    return trace._record(op, array, operands, backward)


def _check_broadcast(a: tuple[int, ...], b: tuple[int, ...], op: str) -> None:
    # Only suffix broadcasting: equal shapes, scalars, or bias rows.
    if a == b or a == () or b == ():
        return
    short, long = (a, b) if len(a) < len(b) else (b, a)
    if len(short) < len(long) and long[len(long) - len(short):] == short:
        return
    raise DimensionError(f"{op}: shapes {a} and {b} are not compatible")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------------


def add(a: Operand, b: Operand) -> Tensor:
    """Elementwise sum with suffix broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    return _emit(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Operand, b: Operand) -> Tensor:
    """Elementwise difference with suffix broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    return _emit(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Operand, b: Operand) -> Tensor:
    """Elementwise product with suffix broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    return _emit(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Operand, b: Operand) -> Tensor:
    """Elementwise quotient with suffix broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _emit(
        "div",
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: Operand) -> Tensor:
    """Elementwise negation."""
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def square(a: Operand) -> Tensor:
    """Elementwise square."""
    a = as_tensor(a)
    return _emit("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a: Operand) -> Tensor:
    """Elementwise square root.

    Raises:
        PreconditionError: If any entry is negative.
    """
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise PreconditionError("sqrt of a negative entry")
    out = np.sqrt(a.data)
    return _emit("sqrt", out, (a,), lambda g: (g / (2.0 * out),))


def silu(v: Operand) -> Tensor:
    """Sigmoid-weighted linear unit, x * sigmoid(x)."""
    v = as_tensor(v)
    # tanh form of the logistic function never overflows
    s = 0.5 * (1.0 + np.tanh(0.5 * v.data))
    return _emit(
        "silu",
        v.data * s,
        (v,),
        lambda g: (g * (s + v.data * s * (1.0 - s)),),
    )


# -- shape manipulation --------------------------------------------------------


def transpose(a: Operand, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes (reverse them when axes is None)."""
    a = as_tensor(a)
    perm = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(perm) != list(range(a.ndim)):
        raise DimensionError(f"transpose: {perm} is not a permutation of {a.ndim} axes")
    inverse = tuple(int(i) for i in np.argsort(perm))
    return _emit(
        "transpose",
        np.transpose(a.data, perm),
        (a,),
        lambda g: (np.transpose(g, inverse),),
    )


def reshape(a: Operand, shape: Sequence[int]) -> Tensor:
    """Reshape without changing the row-major order of values."""
    a = as_tensor(a)
    shape = tuple(int(d) for d in shape)
    if math.prod(shape) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Operand], axis: int = -1) -> Tensor:
    """Concatenate tensors along one axis."""
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    ndim = parts[0].ndim
    if ndim == 0:
        raise DimensionError("concat of 0-d tensors")
    ax = axis % ndim
    for p in parts:
        if p.ndim != ndim or p.shape[:ax] + p.shape[ax + 1:] != parts[0].shape[:ax] + parts[0].shape[ax + 1:]:
            raise DimensionError(
                f"concat: shape {p.shape} does not match {parts[0].shape} off axis {ax}"
            )
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]
    return _emit(
        "concat",
        np.concatenate([p.data for p in parts], axis=ax),
        parts,
        lambda g: tuple(np.split(g, bounds, axis=ax)),
    )


# -- reductions ----------------------------------------------------------------


def sum(a: Operand, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    """Sum over all entries or one axis."""
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), backward)


def mean(a: Operand, axis: Optional[int] = None) -> Tensor:
    """Arithmetic mean over all entries or one axis."""
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise DimensionError("mean of an empty tensor")
    return mul(sum(a, axis=axis), 1.0 / count)


def dot(a: Operand, b: Operand) -> Tensor:
    """Inner product of two vectors of equal length."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dot: need equal-length vectors, got {a.shape} and {b.shape}")
    return sum(mul(a, b))


def norm(a: Operand) -> Tensor:
    """Euclidean norm over all entries."""
    return sqrt(sum(square(a)))


# -- linear algebra ------------------------------------------------------------


def matmul(a: Operand, b: Operand) -> Tensor:
    """Matrix product of an m x k matrix with a k x n matrix or a k-vector.

    Raises:
        DimensionError: If a is not a matrix or the inner dimensions differ.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise DimensionError(f"matmul: unsupported ranks {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")

    if b.ndim == 1:
        return _emit(
            "matvec",
            a.data @ b.data,
            (a, b),
            lambda g: (np.outer(g, b.data), a.data.T @ g),
        )
    return _emit(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


# -- distributions and similarities --------------------------------------------


def softmax(v: Operand) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction.

    Raises:
        DimensionError: If the last axis is empty.
    """
    v = as_tensor(v)
    if v.ndim == 0 or v.shape[-1] == 0:
        raise DimensionError(f"softmax needs a non-empty last axis, got shape {v.shape}")
    shifted = v.data - np.max(v.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=-1, keepdims=True)
    return _emit(
        "softmax",
        s,
        (v,),
        lambda g: (s * (g - np.sum(g * s, axis=-1, keepdims=True)),),
    )


def kl_divergence(p: Operand, q: Operand) -> float:
    """Kullback-Leibler divergence KL(p || q) in nats, with 0 * ln(0/q) = 0.

    Raises:
        DimensionError: If p and q differ in shape.
        PreconditionError: If either input is not a probability vector.
        DivergenceUndefinedError: If q is zero where p is positive.
    """
    p_arr = validate_probability_vector(as_tensor(p).data, "p")
    q_arr = validate_probability_vector(as_tensor(q).data, "q")
    if p_arr.shape != q_arr.shape:
        raise DimensionError(f"kl_divergence: shapes {p_arr.shape} and {q_arr.shape} differ")

    support = p_arr > 0
    if np.any(q_arr[support] == 0):
        raise DivergenceUndefinedError("q is zero where p is positive")

    ps, qs = p_arr[support], q_arr[support]
    return float(np.sum(ps * np.log(ps / qs)))


def _require_nonzero(a: Tensor, name: str) -> None:
    if not np.any(a.data):
        raise DegenerateInputError(f"{name} has zero norm")


def cosine_similarity(a: Operand, b: Operand) -> Tensor:
    """Cosine of the angle between two vectors, as a 0-d tensor.

    Raises:
        DimensionError: If the vectors differ in length.
        DegenerateInputError: If either vector has zero norm.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"cosine_similarity: shapes {a.shape} and {b.shape}")
    _require_nonzero(a, "a")
    _require_nonzero(b, "b")
    return div(dot(a, b), mul(norm(a), norm(b)))


def l2_normalize(a: Operand) -> Tensor:
    """Scale a vector to unit Euclidean norm.

    Raises:
        DegenerateInputError: If the vector has zero norm.
    """
    a = as_tensor(a)
    _require_nonzero(a, "vector")
    return div(a, norm(a))


# -- backward replay -----------------------------------------------------------


def gradients(trace: GradientTrace, output: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
    """Replay the trace backward once and return d(output)/d(w) for every w.

    Args:
        trace: Trace the computation was recorded on.
        output: Single-element tensor produced under the trace.
        wrt: Tensors registered on the trace with ``GradientTrace.register``.

    Returns:
        One gradient per entry of ``wrt``, each shaped like its input. An output
        that never touched the trace is a constant and yields zero gradients.

    Raises:
        ContractError: If output is not a scalar or belongs to another trace.
        UnknownInputError: If a ``wrt`` tensor was never registered on the trace.
    """
    if output.size != 1:
        raise ContractError(f"gradient needs a scalar output, got shape {output.shape}")
    if output.trace is not None and output.trace is not trace:
        raise ContractError("output was produced under a different trace")
    for w in wrt:
        if not trace.is_input(w):
            raise UnknownInputError(f"tensor {w!r} is not a registered input of this trace")

    pending: dict[int, np.ndarray] = {}
    if output.trace is trace and output.trace_id is not None:
        pending[output.trace_id] = np.ones(output.shape)
        for node in reversed(trace._nodes):
            g = pending.pop(node.output, None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if parent is None or pg is None:
                    continue
                pending[parent] = pending[parent] + pg if parent in pending else pg

    result = []
    for w in wrt:
        g = pending.get(w.trace_id)  # type: ignore[arg-type]
        result.append(Tensor._wrap(np.zeros(w.shape) if g is None else np.array(g).reshape(w.shape)))
    return result


def gradient(trace: GradientTrace, output: Tensor, wrt: Tensor) -> Tensor:
    """Return d(output)/d(wrt); see ``gradients``."""
    return gradients(trace, output, [wrt])[0]
