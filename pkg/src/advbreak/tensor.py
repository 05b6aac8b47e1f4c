"""Dense tensors with a reverse-mode gradient tape.

Every differentiable primitive computes its result with numpy, checks that the
result is finite, and (when any operand requires a gradient) appends one record
to the active :class:`Tape`.  :func:`backward` walks the tape in reverse, so
each recorded operation is visited exactly once, and then clears it.

Shape rules
-----------
* ``add``/``sub``/``mul``/``div``: numpy broadcasting; gradients are summed
  back onto each operand's shape.
* ``matmul``: ``(n, k) @ (k, m) -> (n, m)``; a 1-D left operand is allowed.
* ``conv2d``: NHWC input ``(n, h, w, c_in)``, kernel ``(kh, kw, c_in, c_out)``,
  output ``(n, (h + 2p - kh)//s + 1, (w + 2p - kw)//s + 1, c_out)``.
* reductions (``sum``, ``mean``, ``max``, ``sq_norm``) take ``axis`` like numpy
  and accumulate in float64.
* elementwise functions preserve shape.

Kink conventions: relu'(0) = 0, brelu'(0) = brelu'(1) = 0, clamp passes no
gradient at (or beyond) its bounds, max-over-axis routes the gradient to the
first maximal entry.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-30


class ShapeError(ValueError):
    """Operand shapes do not conform to a primitive's shape rule."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class TapeError(RuntimeError):
    """Backward was requested on an empty or already-consumed tape."""


class Tensor:
    """An n-dimensional array that may participate in gradient recording.

    Floating inputs keep their dtype (float32 or float64); anything else is
    stored as float32.
    """

    __slots__ = ("data", "requires_grad", "grad", "_record", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._record = None

    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item: expected a single element, got shape {self.shape}")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def max(self, axis=-1):
        return max(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


class _Record:
    __slots__ = ("name", "out", "parents", "backward")

    def __init__(self, name, out, parents, backward):
        self.name = name
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered log of executed differentiable operations.

    Usable as a context manager to make it the active tape of the current
    thread; otherwise each thread records onto its own default tape.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def record(self, name: str, out: Tensor, parents: Sequence[Tensor], fn: Callable) -> None:
        rec = _Record(name, out, tuple(parents), fn)
        out._record = rec
        self.records.append(rec)

    def clear(self) -> None:
        for rec in self.records:
            rec.out._record = None
        self.records.clear()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = [Tape()]
        _local.enabled = True
    return _local.tapes


def current_tape() -> Tape:
    return _stack()[-1]


def is_recording() -> bool:
    _stack()
    return _local.enabled


@contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    _stack()
    prev = _local.enabled
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _const(x, like: np.ndarray) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(name: str, data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{name}: produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._record = None
    out.requires_grad = False
    if is_recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        current_tape().record(name, out, parents, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(name: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- binary arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a.data, b.data)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a.data, b.data)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a.data, b.data)

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a.data, b.data)
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", out, (a, b), back)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _const(b, a.data)
    if isinstance(b, Tensor):
        return _const(a, b.data), b
    return Tensor(a), Tensor(b)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def back(g):
        if a.ndim == 1:
            ga = b.data @ g if a.requires_grad else None
            gb = np.outer(a.data, g) if b.requires_grad else None
        else:
            ga = g @ b.data.T if a.requires_grad else None
            gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), back)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ho, wo, kh, kw, c),
        strides=(sn, stride * sh, stride * sw, sh, sw, sc),
        writeable=False,
    )
    return view.reshape(n * ho * wo, kh * kw * c)


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on NHWC input with zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} / padding={padding}")
    n, h, wd, c = x.shape
    kh, kw, _, cout = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    p = padding
    if p:
        xp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=x.dtype)
        xp[:, p : p + h, p : p + wd, :] = x.data
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = w.data.reshape(kh * kw * c, cout)
    out = (cols @ w2).reshape(n, ho, wo, cout)

    def back(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            # (kh*kw*c, cout) @ (cout, n*ho*wo) keeps each kernel tap contiguous
            dcols = (w2 @ g2.T).reshape(kh, kw, c, n, ho, wo)
            dxp = np.zeros((c, n) + xp.shape[1:3], dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[i, j]
            dxp = dxp.transpose(1, 2, 3, 0)
            gx = dxp[:, p : p + h, p : p + wd, :] if p else dxp
        return gx, gw

    return _make("conv2d", out, (x, w), back)


# --- elementwise ----------------------------------------------------------


def _unary(name: str, x, out: np.ndarray, dfn: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    x = as_tensor(x)
    return _make(name, out, (x,), lambda g: (g * dfn(out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)
    return _make("relu", out, (x,), lambda g: (g * (out > 0),))


def brelu(x) -> Tensor:
    """Bounded rectifier min(max(x, 0), 1)."""
    x = as_tensor(x)
    mask = (x.data > 0) & (x.data < 1)
    return _make("brelu", np.clip(x.data, 0, 1), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data * 0.5)
    out += 1
    out *= 0.5
    return _unary("sigmoid", x, out, lambda y: y * (1 - y))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    return _unary("tanh", x, np.tanh(x.data), lambda y: 1 - y * y)


def exp(x) -> Tensor:
    x = as_tensor(x)
    return _unary("exp", x, np.exp(x.data), lambda y: y)


def log(x) -> Tensor:
    """Natural log with inputs clamped below at 1e-30."""
    x = as_tensor(x)
    safe = np.maximum(x.data, LOG_FLOOR)
    live = x.data > LOG_FLOOR
    return _make("log", np.log(safe), (x,), lambda g: (np.where(live, g / safe, 0).astype(g.dtype),))


def clamp(x, lo=None, hi=None) -> Tensor:
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    mask = np.ones(x.shape, dtype=bool)
    if lo is not None:
        mask &= x.data > lo
    if hi is not None:
        mask &= x.data < hi
    return _make("clamp", out, (x,), lambda g: (g * mask,))


def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True, dtype=np.float64).astype(z.dtype)


def softmax(x, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """softmax(x / temperature) along ``axis``."""
    x = as_tensor(x)
    if temperature <= 0:
        raise ValueError("softmax: temperature must be positive")
    y = _softmax_np(x.data / temperature, axis)

    def back(g):
        s = (g * y).sum(axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype)
        return (y * (g - s) / temperature,)

    return _make("softmax", y, (x,), back)


def log_softmax(x, axis: int = -1, temperature: float = 1.0) -> Tensor:
    x = as_tensor(x)
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True, dtype=np.float64)).astype(z.dtype)
    out = z - lse
    y = np.exp(out)

    def back(g):
        s = g.sum(axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype)
        return ((g - y * s) / temperature,)

    return _make("log_softmax", out, (x,), back)


# --- reductions -----------------------------------------------------------


def _expand(g: np.ndarray, shape: tuple, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    return np.broadcast_to(np.expand_dims(g, axes), shape)


def sum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, dtype=np.float64), dtype=x.dtype)
    return _make("sum", out, (x,), lambda g: (_expand(g, x.shape, axis).copy(),))


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.mean(axis=axis, dtype=np.float64), dtype=x.dtype)
    count = x.size // out.size
    return _make("mean", out, (x,), lambda g: (_expand(g / count, x.shape, axis).copy(),))


def max(x, axis: int = -1) -> Tensor:
    """Maximum along one axis; ties send the gradient to the first maximum."""
    x = as_tensor(x)
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make("max", out, (x,), back)


def sq_norm(x, axis=None) -> Tensor:
    """Squared L2 norm, over all elements or over ``axis``."""
    x = as_tensor(x)
    out = np.asarray((x.data.astype(np.float64) ** 2).sum(axis=axis), dtype=x.dtype)
    return _make("sq_norm", out, (x,), lambda g: (2 * x.data * _expand(g, x.shape, axis),))


# --- structural -----------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def back(g):
        return tuple(np.split(g, bounds[1:-1], axis=axis))

    return _make("concat", out, xs, back)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = np.array(x.data[index])

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _make("getitem", out, (x,), back)


# --- backward -------------------------------------------------------------


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` of every grad-requiring tensor that ``loss`` depends on.

    Leaf gradients accumulate additively across calls; leaves that were used
    on the tape but are unreachable from ``loss`` receive zeros.  The tape is
    cleared afterwards, so calling this twice without re-running the forward
    computation raises :class:`TapeError`.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = tape if tape is not None else current_tape()
    if not tape.records:
        raise TapeError("backward: tape is empty (already consumed, or nothing was recorded)")
    if loss._record is None:
        tape.clear()
        raise TapeError("backward: loss was not produced on this tape")

    pending = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves = {}
    for rec in reversed(tape.records):
        g = pending.pop(id(rec.out), None)
        if g is None:
            for p in rec.parents:
                if p.requires_grad and p._record is None:
                    leaves.setdefault(id(p), p)
            continue
        rec.out.grad = g
        for p, gp in zip(rec.parents, rec.backward(g)):
            if not p.requires_grad:
                continue
            if p._record is None:
                leaves.setdefault(id(p), p)
                if gp is not None:
                    gp = np.asarray(gp, dtype=p.dtype).reshape(p.shape)
                    p.grad = gp.copy() if p.grad is None else p.grad + gp
            elif gp is not None:
                k = id(p)
                pending[k] = gp if k not in pending else pending[k] + gp
    for p in leaves.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    tape.clear()
