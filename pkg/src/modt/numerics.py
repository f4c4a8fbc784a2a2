"""Dense tensor arithmetic with tape-based reverse-mode differentiation.

Values are float64 numpy arrays (1-D or 2-D in practice).  Operations executed
while a :class:`GradTape` is active are recorded on it; :func:`backward` walks
the record in reverse and returns a gradient for every tensor that was created
with ``requires_grad=True``.

    >>> x = Tensor(3.0, requires_grad=True)
    >>> with GradTape() as tape:
    ...     y = x * x
    >>> float(backward(y, tape)[x])
    6.0
"""
from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_EPS = 1e-12

_ACTIVE_TAPE: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "modt_active_tape", default=None
)


class InvalidInputError(ValueError):
    """Raised when an operation receives arguments outside its contract."""


class Tensor:
    __slots__ = ("value", "requires_grad", "_node", "__weakref__")

    def __init__(self, value, requires_grad: bool = False):
        arr = np.array(value, dtype=np.float64)
        arr.setflags(write=False)
        self.value = arr
        self.requires_grad = requires_grad
        self._node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt a freshly computed array without copying it."""
        out = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        out.value = arr
        out.requires_grad = False
        out._node = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        if self.value.size != 1:
            raise InvalidInputError("tensor is not a scalar")
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class GradTape:
    """Records differentiable operations in execution (topological) order.

    A tape belongs to one execution context; use it as a context manager.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "GradTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._node is not None


def _record(value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    value = np.asarray(value)
    if not value.flags.owndata and value.base is not None:
        value = value.copy()  # views would alias an input's buffer
    out = Tensor._wrap(value)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(_tracked(t) for t in inputs):
        node = _Node(out, tuple(inputs), vjp)
        out._node = node
        tape.nodes.append(node)
    return out


def _check_finite(value: np.ndarray, opname: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{opname} produced non-finite values")
    return value


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor, tape: GradTape) -> dict[Tensor, np.ndarray]:
    """Gradient of scalar ``loss`` w.r.t. every ``requires_grad`` tensor seen on ``tape``."""
    if loss.value.size != 1:
        raise InvalidInputError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.out))
        if g is None:
            continue
        if not node.out.requires_grad:
            del grads[id(node.out)]
        for inp, part in zip(node.inputs, node.vjp(g)):
            if part is None or not _tracked(inp):
                continue
            key = id(inp)
            grads[key] = grads[key] + part if key in grads else np.asarray(part, dtype=np.float64)
    leaves: dict[int, Tensor] = {id(loss): loss} if loss.requires_grad else {}
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad:
                leaves.setdefault(id(inp), inp)
    return {t: grads.get(key, np.zeros_like(t.value)) for key, t in leaves.items()}


def grad_of(grads: dict[Tensor, np.ndarray], t: Tensor) -> np.ndarray:
    """Gradient for ``t``; zero when ``t`` did not participate."""
    return grads.get(t, np.zeros_like(t.value))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = _check_finite(av / bv, "div")
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.value, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _check_finite(np.exp(a.value), "exp")
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    """Natural log with the argument clamped to at least ``LOG_EPS``."""
    a = as_tensor(a)
    x = np.maximum(a.value, LOG_EPS)
    live = a.value > LOG_EPS
    return _record(np.log(x), (a,), lambda g: (np.where(live, g / x, 0.0),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _record(out, (a,), lambda g: (g * sig,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.value)
    return _record(np.abs(a.value), (a,), lambda g: (g * s,))


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    live = a.value > lo
    return _record(np.maximum(a.value, lo), (a,), lambda g: (np.where(live, g, 0.0),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    live = (a.value >= lo) & (a.value <= hi)
    return _record(np.clip(a.value, lo, hi), (a,), lambda g: (np.where(live, g, 0.0),))


# ---------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise InvalidInputError("matmul expects 2-D operands")
    if av.shape[1] != bv.shape[0]:
        raise InvalidInputError(f"matmul shape mismatch {av.shape} @ {bv.shape}")
    return _record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.value.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _record(a.value[key], (a,), vjp)


def take_rows(a, index) -> Tensor:
    """Rows of ``a`` selected (with repetition allowed) by an integer index."""
    idx = np.asarray(index, dtype=np.intp)
    return getitem(as_tensor(a), idx)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([t.value for t in ts], axis=axis),
        tuple(ts),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def group_max(a, group: int) -> Tensor:
    """Max over consecutive blocks of ``group`` rows: (G*group, C) -> (G, C).

    Gradient flows to the first maximal row of each block.
    """
    a = as_tensor(a)
    rows, cols = a.shape
    if group < 1 or rows % group:
        raise InvalidInputError(f"{rows} rows not divisible into groups of {group}")
    blocks = a.value.reshape(rows // group, group, cols)
    arg = blocks.argmax(axis=1)
    out = np.take_along_axis(blocks, arg[:, None, :], axis=1)[:, 0, :]

    def vjp(g):
        full = np.zeros_like(blocks)
        np.put_along_axis(full, arg[:, None, :], g[:, None, :], axis=1)
        return (full.reshape(rows, cols),)

    return _record(out, (a,), vjp)


def softmax_rows(m) -> Tensor:
    """Row-wise softmax with per-row max subtraction."""
    m = as_tensor(m)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise InvalidInputError(f"softmax_rows needs a nonempty 2-D tensor, got {m.shape}")
    z = m.value - m.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _record(out, (m,), vjp)


def log_softmax_rows(m) -> Tensor:
    m = as_tensor(m)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise InvalidInputError(f"log_softmax_rows needs a nonempty 2-D tensor, got {m.shape}")
    z = m.value - m.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _record(out, (m,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


# ---------------------------------------------------------------- gradient check


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x, h: float = 1e-5, coords=None
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``coords`` optionally restricts evaluation to a list of flat indices; the
    remaining entries of the result are NaN.
    """
    if h <= 0:
        raise InvalidInputError("step h must be positive")
    base = np.array(x.value if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.full(flat.shape, np.nan) if coords is not None else np.empty(flat.shape)
    for i in range(flat.size) if coords is None else coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(base.copy()))
        flat[i] = orig - h
        fm = float(f(base.copy()))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(base.shape)


def gradient_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Worst-case error: relative, or absolute where ``|analytic| < floor``."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    if a.size == 0:
        return 0.0
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    err = np.where(np.abs(a) < floor, diff, diff / np.where(scale > 0, scale, 1.0))
    return float(err.max())
