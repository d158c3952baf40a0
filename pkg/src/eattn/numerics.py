"""Dense tensor substrate for the attention kernels.

Tensors wrap contiguous numpy arrays in either float32 or float64. Every
primitive is a pure function returning a new Tensor; when a gradient tape is
active (see :mod:`eattn.grad`) the primitive records itself so it can be
differentiated later. Buffer sizes are reported to a process-wide
:class:`AllocationTracker` so benchmarks can read peak tensor memory.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Iterator, Sequence

import numpy as np

PRECISIONS = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    pass


class AllocationTracker:
    """Counts bytes held by live tensor buffers."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.live_bytes = 0
        self.peak_bytes = 0

    def alloc(self, nbytes: int) -> None:
        with self._lock:
            self.live_bytes += nbytes
            if self.live_bytes > self.peak_bytes:
                self.peak_bytes = self.live_bytes

    def free(self, nbytes: int) -> None:
        with self._lock:
            self.live_bytes -= nbytes

    def reset_peak(self) -> None:
        with self._lock:
            self.peak_bytes = self.live_bytes


TRACKER = AllocationTracker()

_verify = False
_local = threading.local()


def set_verification(enabled: bool) -> None:
    """Toggle NaN/Inf scans after every primitive and strict division."""
    global _verify
    _verify = bool(enabled)


def verification_enabled() -> bool:
    return _verify


@contextmanager
def verification(enabled: bool = True) -> Iterator[None]:
    prev = _verify
    set_verification(enabled)
    try:
        yield
    finally:
        set_verification(prev)


def dtype_of(precision: str):
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected f32 or f64") from None


class Tensor:
    """Immutable dense array.

    Only buffers the tensor owns are charged to the tracker; numpy views
    (e.g. a reshape of a contiguous array) share their parent's bytes.
    """

    __slots__ = ("data", "requires_grad", "_charged", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self._charged = arr.nbytes if arr.base is None else 0
        if self._charged:
            TRACKER.alloc(self._charged)

    def __del__(self):
        if self._charged:
            TRACKER.free(self._charged)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def precision(self) -> str:
        return "f32" if self.data.dtype == np.float32 else "f64"

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, {self.precision}, data={self.data!r})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_const_like(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)


def tensor(data, precision: str | None = None, requires_grad: bool = False) -> Tensor:
    dtype = None if precision is None else dtype_of(precision)
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, precision: str = "f64") -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype_of(precision)))


def ones(shape, precision: str = "f64") -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype_of(precision)))


# ---------------------------------------------------------------------------
# tape hooks

def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record(op: str, out: Tensor, inputs: tuple, **ctx) -> Tensor:
    tape = current_tape()
    if tape is None or tape.paused:
        return out
    if not any(t is not None and t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    tape.record(op, inputs, out, ctx)
    return out


def _new(arr: np.ndarray, op: str) -> Tensor:
    if _verify and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite value produced by {op}")
    return Tensor(arr)


def _const_like(x, ref: Tensor) -> Tensor:
    return Tensor(np.asarray(x, dtype=ref.dtype))


def _operand(b, ref: Tensor):
    """Split a binary operand into (numpy array, Tensor-or-None)."""
    if isinstance(b, Tensor):
        return b.data, b
    return np.asarray(b, dtype=ref.dtype), None


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# element-wise primitives

def add(a: Tensor, b) -> Tensor:
    bd, bt = _operand(b, a)
    _check_broadcast("add", a.data, bd)
    return _record("add", _new(a.data + bd, "add"), (a, bt))


def sub(a: Tensor, b) -> Tensor:
    bd, bt = _operand(b, a)
    _check_broadcast("sub", a.data, bd)
    return _record("sub", _new(a.data - bd, "sub"), (a, bt))


def mul(a: Tensor, b) -> Tensor:
    bd, bt = _operand(b, a)
    _check_broadcast("mul", a.data, bd)
    return _record("mul", _new(a.data * bd, "mul"), (a, bt), const=bd)


def div(a: Tensor, b) -> Tensor:
    bd, bt = _operand(b, a)
    _check_broadcast("div", a.data, bd)
    if _verify and np.any(bd == 0):
        raise ZeroDivisionError(f"div: exact zero in divisor of shape {bd.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / bd
    return _record("div", _new(out, "div"), (a, bt), const=bd)


def neg(a: Tensor) -> Tensor:
    return _record("neg", _new(-a.data, "neg"), (a,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record("exp", _new(out, "exp"), (a,))


def square(a: Tensor) -> Tensor:
    return _record("square", _new(a.data * a.data, "square"), (a,))


def pow_int(a: Tensor, n: int) -> Tensor:
    if int(n) != n:
        raise ValueError(f"pow_int expects an integer exponent, got {n!r}")
    n = int(n)
    return _record("pow_int", _new(ipow(a.data, n), "pow_int"), (a,), n=n)


def ipow(x: np.ndarray, n: int) -> np.ndarray:
    """x**n for integer n by repeated squaring (np.power is slow on floats)."""
    if n < 0:
        return 1.0 / ipow(x, -n)
    result = np.ones_like(x)
    base = x
    while n:
        if n & 1:
            result = result * base
        n >>= 1
        if n:
            base = base * base
    return result


def sqrt(a: Tensor) -> Tensor:
    return _record("sqrt", _new(np.sqrt(a.data), "sqrt"), (a,))


def tanh(a: Tensor) -> Tensor:
    return _record("tanh", _new(np.tanh(a.data), "tanh"), (a,))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "exp": exp, "neg": neg, "square": square, "pow_int": pow_int,
}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name; unary ops ignore ``b`` except ``pow_int`` (exponent)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown element-wise op {op!r}") from None
    if op in ("exp", "neg", "square"):
        return fn(a)
    return fn(a, b)


# ---------------------------------------------------------------------------
# reductions and scans

def _axis(a: Tensor, axis: int, op: str) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise IndexError(f"{op}: axis {axis} out of range for rank {a.ndim}")
    return axis % a.ndim


def cumsum(a: Tensor, axis: int) -> Tensor:
    axis = _axis(a, axis, "cumsum")
    return _record("cumsum", _new(np.cumsum(a.data, axis=axis), "cumsum"), (a,), axis=axis)


def reduce(op: str, a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(_axis(a, ax, op) for ax in axes)
        if any(a.shape[ax] == 0 for ax in axes):
            raise ValueError(f"{op}: reduction over an empty axis")
    else:
        axes = tuple(range(a.ndim))
        if a.data.size == 0:
            raise ValueError(f"{op}: reduction over an empty tensor")
    if op == "sum":
        out = np.sum(a.data, axis=axes, keepdims=keepdims)
    elif op == "mean":
        out = np.mean(a.data, axis=axes, keepdims=keepdims)
    elif op == "max":
        out = np.max(a.data, axis=axes, keepdims=keepdims)
    else:
        raise ValueError(f"unknown reduction {op!r}")
    return _record(op, _new(np.asarray(out, dtype=a.dtype), op), (a,),
                   axes=axes, keepdims=keepdims)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return reduce("sum", a, axis, keepdims)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return reduce("mean", a, axis, keepdims)


def max_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return reduce("max", a, axis, keepdims)


# ---------------------------------------------------------------------------
# linear algebra and normalisation

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ in {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    return _record("matmul", _new(np.matmul(a.data, b.data), "matmul"), (a, b))


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax; entries where ``mask`` is False get weight 0."""
    axis = _axis(a, axis, "softmax")
    x = a.data
    if np.any(np.isnan(x)):
        raise FloatingPointError("softmax: NaN input")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return _record("softmax", _new(out, "softmax"), (a,), axis=axis)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _axis(a, axis, "log_softmax")
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    out = x - m - np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return _record("log_softmax", _new(out, "log_softmax"), (a,), axis=axis)


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(tuple(shape))
    return _record("reshape", Tensor(out), (a,), shape=a.shape)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if not axes else tuple(axes)
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _record("transpose", Tensor(out), (a,), axes=axes)


def getitem(a: Tensor, idx) -> Tensor:
    out = np.array(a.data[idx], dtype=a.dtype)
    return _record("getitem", _new(out, "getitem"), (a,), idx=idx)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    axis = axis % out.ndim
    return _record("stack", _new(out, "stack"), tuple(tensors), axis=axis)


# ---------------------------------------------------------------------------
# deterministic random numbers

class Rng:
    """Seeded Philox (counter-based) stream; identical seeds replay identically."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.Philox(self.seed))

    def uniform(self, shape, low: float = -1.0, high: float = 1.0,
                precision: str = "f64") -> Tensor:
        arr = self.generator.uniform(low, high, size=shape)
        return Tensor(arr.astype(dtype_of(precision)))

    def normal(self, shape, std: float = 1.0, precision: str = "f64") -> Tensor:
        arr = self.generator.normal(0.0, std, size=shape)
        return Tensor(arr.astype(dtype_of(precision)))

    def spawn(self, key: int) -> "Rng":
        return Rng((self.seed * 0x9E3779B97F4A7C15 + key) & 0xFFFFFFFFFFFFFFFF)
