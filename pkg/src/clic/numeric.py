"""Dense tensors with a small reverse-mode gradient tape.

Only the primitives the toy encoder and the two losses need are provided.
Values are float32 by default; reductions accumulate in float64 and round
once.  ``precision(np.float64)`` switches the working dtype, which the
finite-difference checks use to keep rounding noise below their tolerance.

Recording is explicit::

    with GradTape() as tape:
        loss = mean(relu(conv2d(x, k, stride=2)))
    (grad_k,) = tape.gradient(loss, [k])

Operations executed outside a tape (or on tensors that do not require
gradients) are plain forward computations and leave no trace.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NormalizationError

_dtype: contextvars.ContextVar[type] = contextvars.ContextVar("clic_dtype", default=np.float32)
_active_tape: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "clic_tape", default=None
)


def default_dtype() -> type:
    return _dtype.get()


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    token = _dtype.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _dtype.reset(token)


class Tensor:
    """Immutable n-d array of floats.

    The underlying buffer is marked read-only; every operation returns a new
    tensor.  ``requires_grad`` marks leaves (parameters) the tape should
    differentiate with respect to.
    """

    __slots__ = ("_data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype(), copy=True)
        arr.flags.writeable = False
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        if not arr.flags.c_contiguous:
            arr = arr.copy()
        if arr.flags.writeable:
            arr.flags.writeable = False
        t._data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def ndim(self) -> int:
        return self._data.ndim

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return self._data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self._data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self._data, requires_grad=False)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor / tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class GradTape:
    """Ordered record of primitive operations for one backward pass.

    A tape is single-owner: do not share one across threads.  Tapes can be
    reused for several ``gradient`` calls; adjoints are rebuilt from zero on
    each call.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "GradTape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Adjoints of ``loss`` with respect to ``params``.

        Parameters that the loss does not depend on get zero arrays.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        adjoints: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
        for node in reversed(self.nodes):
            g = adjoints.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + gi
                else:
                    adjoints[key] = gi
        out = []
        for p in params:
            g = adjoints.get(id(p))
            if g is None:
                g = np.zeros(p.shape, dtype=p.data.dtype)
            out.append(np.asarray(g, dtype=p.data.dtype).reshape(p.shape))
        return out


def backward(loss: Tensor, params: Sequence[Tensor], tape: GradTape | None = None) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` recorded on ``tape`` (or the active tape)."""
    tape = tape or _active_tape.get()
    if tape is None:
        raise ContractError("backward requires the loss to be produced under an active GradTape")
    return tape.gradient(loss, params)


def _record(out_arr: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    tape = _active_tape.get()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_arr, requires_grad=tracked)
    if tracked:
        tape.nodes.append(_Node(out, inputs, bwd))
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        axes = tuple(
            i for i in range(max(a.ndim, b.ndim))
            if i >= a.ndim or i >= b.ndim or a.shape[i] != b.shape[i]
        )
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ", axes)


# -- elementwise ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a Python scalar."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(b)
        return _record(a.data * c, (a,), lambda g: (g * c,))
    _same_shape(a, b, "mul")
    av, bv = a.data, b.data
    return _record(av * bv, (a, b), lambda g: (g * bv, g * av))


def square(x: Tensor) -> Tensor:
    xv = x.data
    return _record(xv * xv, (x,), lambda g: (2 * g * xv,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias along axis 1 (the only broadcast supported)."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match axis 1 of {x.shape}", (1,))
    shape = (1, b.shape[0]) + (1,) * (x.ndim - 2)
    reduce_axes = tuple(i for i in range(x.ndim) if i != 1)

    def bwd(g):
        return g, g.sum(axis=reduce_axes, dtype=np.float64).astype(g.dtype)

    return _record(x.data + b.data.reshape(shape), (x, b), bwd)


# -- shape ---------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _record(out, (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in xs]}") from exc
    return _record(out, xs, bwd)


# -- reductions ----------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, dtype=np.float64).astype(x.data.dtype)
    shape = x.shape

    def bwd(g):
        g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, shape).astype(g.dtype),)

    return _record(out, (x,), bwd)


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, dtype=np.float64).astype(x.data.dtype)
    shape = x.shape

    def bwd(g):
        g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g / g.dtype.type(count), shape).astype(g.dtype),)

    return _record(out, (x,), bwd)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-sum-exp along one axis."""
    xv = x.data.astype(np.float64)
    mx = xv.max(axis=axis, keepdims=True)
    e = np.exp(xv - mx)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + mx).squeeze(axis)
    soft = (e / s).astype(x.data.dtype)

    def bwd(g):
        return (np.expand_dims(g, axis) * soft,)

    return _record(out.astype(x.data.dtype), (x,), bwd)


# -- linear algebra ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}", (1,))
    av, bv = a.data, b.data
    return _record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 0.0) -> Tensor:
    """Scale vectors along ``axis`` to unit Euclidean length.

    Raises NormalizationError when any vector has zero norm.
    """
    xv = x.data.astype(np.float64)
    norm = np.sqrt((xv * xv).sum(axis=axis, keepdims=True))
    if np.any(norm <= eps):
        raise NormalizationError("cannot normalize a zero-norm vector")
    y64 = xv / norm
    y = y64.astype(x.data.dtype)

    def bwd(g):
        g64 = g.astype(np.float64)
        dot = (g64 * y64).sum(axis=axis, keepdims=True)
        return (((g64 - y64 * dot) / norm).astype(g.dtype),)

    return _record(y, (x,), bwd)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Valid 3x3 convolution (cross-correlation) in N,C,H,W layout.

    Output spatial size is ``(H - 3) // stride + 1`` per axis.
    """
    if stride not in (1, 2):
        raise DimensionError(f"stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    k, kc, kh, kw = kernel.shape
    bad = []
    if kc != c:
        bad.append(1)
    if (kh, kw) != (3, 3):
        bad.extend([2, 3])
    if bad:
        raise DimensionError(
            f"conv2d kernel {kernel.shape} incompatible with input {x.shape}", tuple(bad)
        )
    if h < 3 or w < 3:
        raise DimensionError(f"conv2d input spatial size {h}x{w} is below 3x3", (2, 3))
    ho, wo = (h - 3) // stride + 1, (w - 3) // stride + 1
    xv, kv = x.data, kernel.data
    win = sliding_window_view(xv, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * 9)
    kmat = kv.reshape(k, c * 9)
    out = (cols @ kmat.T).reshape(n, ho, wo, k).transpose(0, 3, 1, 2)

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
        gk = (gmat.T @ cols).reshape(kv.shape)
        gcols = (gmat @ kmat).reshape(n, ho, wo, c, 3, 3).transpose(0, 3, 1, 2, 4, 5)
        gx = np.zeros(xv.shape, dtype=g.dtype)
        he, we = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(3):
            for j in range(3):
                gx[:, :, i:i + he:stride, j:j + we:stride] += gcols[..., i, j]
        return gx, gk

    return _record(np.ascontiguousarray(out), (x, kernel), bwd)


# -- finite differences --------------------------------------------------


def finite_difference(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-3) -> list[np.ndarray]:
    """Central-difference gradient of ``fn()`` with respect to each parameter.

    ``fn`` must read the parameters' current values each call; they are
    swapped in place on the tensor objects (the buffers stay read-only).
    """
    grads = []
    for p in params:
        base = p.data.copy()
        g = np.zeros(base.shape, dtype=np.float64)
        flat = base.reshape(-1)
        for i in range(flat.size):
            vals = []
            for delta in (step, -step):
                bumped = flat.copy()
                bumped[i] = flat[i] + delta
                p._data = bumped.reshape(base.shape)
                p._data.flags.writeable = False
                vals.append(float(fn().data.astype(np.float64).reshape(())))
            g.reshape(-1)[i] = (vals[0] - vals[1]) / (2 * step)
        p._data = base
        p._data.flags.writeable = False
        grads.append(g)
    return grads


def max_relative_error(analytic: Iterable[np.ndarray], numeric: Iterable[np.ndarray], floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)`` over all arrays."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
