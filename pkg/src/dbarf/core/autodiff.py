"""Reverse-mode automatic differentiation over dense numpy arrays.

Operations on :class:`Tensor` objects are evaluated eagerly. While a
:class:`Tape` is active, every primitive whose inputs require gradients is
appended to it together with a closure computing the vector-Jacobian product,
so :func:`backward` can replay the tape in reverse order.
"""

import itertools
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, ShapeError, TapeStateError

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.float64
_node_ids = itertools.count()
_active_tapes: List["Tape"] = []


def set_default_dtype(dtype) -> None:
    """Set the floating dtype used for new tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported tensor dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the default tensor dtype."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """A dense array that can take part in reverse-mode differentiation."""

    # Makes ndarray (op) Tensor dispatch to the Tensor's reflected operator.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_ids)

    @property
    def shape(self) -> Tuple[int, ...]:
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

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis=axis, keepdims=keepdims)

    def min(self, axis=None, keepdims=False):
        return min_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def abs(self):
        return abs_(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


ArrayLike = Union[Tensor, np.ndarray, float, int]


@dataclass(eq=False)
class TapeRecord:
    """One primitive application recorded for the backward pass."""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

    @property
    def input_ids(self) -> Tuple[int, ...]:
        return tuple(t.node_id for t in self.inputs)

    @property
    def output_id(self) -> int:
        return self.output.node_id


class Tape:
    """Ordered record of the primitives evaluated while the tape was active.

    A tape is single-owner: enter it once, run the forward computation, exit,
    then call :func:`backward` as many times as needed.
    """

    def __init__(self):
        self.records: List[TapeRecord] = []
        self._entered = False
        self._finished = False

    def __enter__(self) -> "Tape":
        if self._entered:
            raise TapeStateError("A tape records exactly one forward evaluation")
        self._entered = True
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _active_tapes.remove(self)
        self._finished = True
        return False

    @property
    def finished(self) -> bool:
        return self._finished

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op, inputs, output, backward_fn) -> None:
        self.records.append(TapeRecord(op, tuple(inputs), output, backward_fn))

    def ops(self) -> List[str]:
        return [r.op for r in self.records]


def active_tape() -> Optional[Tape]:
    return _active_tapes[-1] if _active_tapes else None


def _as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    data = np.asarray(data)
    if not np.issubdtype(data.dtype, np.floating):
        data = data.astype(_DEFAULT_DTYPE)
    tape = active_tape()
    requires = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires, dtype=data.dtype)
    if requires:
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# Elementwise binary primitives


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("div", a.data / b.data, (a, b), backward)


def neg(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a: ArrayLike, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a constant scalar exponent."""
    a = _as_tensor(a)
    if isinstance(exponent, Tensor) or np.ndim(exponent) != 0:
        raise ShapeError("power", a.shape, np.shape(exponent))
    p = float(exponent)

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make("power", a.data**p, (a,), backward)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", np.matmul(a.data, b.data), (a, b), backward)


# Elementwise unary primitives


def relu(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)
    return _make("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.data)
    return _make("exp", e, (a,), lambda g: (g * e,))


def log(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def abs_(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sin(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    return _make("sin", np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    return _make("cos", np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def clip(a: ArrayLike, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; values inside pass through unchanged."""
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# Reductions


def _normalize_axes(axis, ndim) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return None
    axes = (axis,) if np.ndim(axis) == 0 else tuple(axis)
    return tuple(sorted(ax % ndim for ax in axes))


def _expand_grad(g, shape, axes, keepdims):
    if axes is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)

    def backward(g):
        return (np.array(_expand_grad(g, a.shape, axes, keepdims)),)

    return _make("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))

    def backward(g):
        return (np.array(_expand_grad(g, a.shape, axes, keepdims)) / count,)

    return _make("mean", a.data.mean(axis=axes, keepdims=keepdims), (a,), backward)


def _extremum(op: str, reducer, a: ArrayLike, axis, keepdims) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    kept = reducer(a.data, axis=axes, keepdims=True)
    hits = a.data == kept
    share = hits / hits.sum(axis=axes, keepdims=True)
    out = kept if keepdims else reducer(a.data, axis=axes, keepdims=False)

    def backward(g):
        return (share * _expand_grad(g, a.shape, axes, keepdims),)

    return _make(op, out, (a,), backward)


def max_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    return _extremum("max", np.max, a, axis, keepdims)


def min_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    return _extremum("min", np.min, a, axis, keepdims)


# Structural primitives


def broadcast_to(a: ArrayLike, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast", a.shape, shape) from None
    return _make("broadcast", data, (a,), lambda g: (_unbroadcast(g, a.shape),))


def reshape(a: ArrayLike, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(np.atleast_1d(shape))) from None
    return _make("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes=None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inverse = tuple(np.argsort(axes))
    return _make(
        "transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),)
    )


def swapaxes(a: ArrayLike, axis1: int, axis2: int) -> Tensor:
    a = _as_tensor(a)
    axes = list(range(a.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(a, axes)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ShapeError("concat", tensors[0].shape, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    data = np.concatenate([t.data for t in tensors], axis=ax)
    return _make("concat", data, tensors, backward)


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        ax = axis % (t.ndim + 1)
        expanded.append(reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]))
    return concat(expanded, axis=axis)


def getitem(a: ArrayLike, index) -> Tensor:
    """Basic or advanced indexing; the backward pass scatter-adds."""
    a = _as_tensor(a)
    if isinstance(index, np.ndarray) and index.dtype == bool:
        index = np.nonzero(index)
    try:
        data = a.data[index]
    except IndexError as exc:
        raise ShapeError("slice", a.shape) from exc

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, slice, type(Ellipsis), type(None))) for p in parts)

    def backward(g):
        grad = np.zeros_like(a.data)
        if basic:
            grad[index] += g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return _make("slice", np.array(data), (a,), backward)


def conv2d(x: ArrayLike, weight: ArrayLike, stride: int = 1, padding=0) -> Tensor:
    """2-D cross-correlation of ``x`` (N,C,H,W) with ``weight`` (O,C,kh,kw).

    ``padding`` is a zero pad, either one int or a (rows, cols) pair.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    ph, pw = (padding, padding) if np.ndim(padding) == 0 else tuple(padding)
    n, c, h, w = x.shape
    kh, kw = weight.shape[2:]
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError("conv2d", x.shape, weight.shape)
    oh = (xp.shape[2] - kh) // stride + 1
    ow = (xp.shape[3] - kw) // stride + 1
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,ocij->nohw", cols, weight.data, optimize=True)

    def backward(g):
        gw = np.einsum("nchwij,nohw->ocij", cols, g, optimize=True)
        gcols = np.einsum("nohw,ocij->nchwij", g, weight.data, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                    gcols[:, :, :, :, i, j]
                )
        return gxp[:, :, ph : ph + h, pw : pw + w], gw

    return _make("conv2d", out, (x, weight), backward)


def bilinear_sample(fmap: ArrayLike, coords: ArrayLike) -> Tuple[Tensor, np.ndarray]:
    """Sample an (H,W,C) map at continuous (x, y) pixel coordinates (N,2).

    Pixel centers sit on integer coordinates. Samples outside
    ``[0, W-1] x [0, H-1]`` return zeros and contribute no gradient; the
    returned boolean mask marks the in-bounds samples.
    """
    fmap, coords = _as_tensor(fmap), _as_tensor(coords)
    if fmap.ndim != 3 or fmap.shape[0] < 2 or fmap.shape[1] < 2:
        raise ShapeError("bilinear_sample", fmap.shape, coords.shape)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError("bilinear_sample", fmap.shape, coords.shape)
    xy = coords.data
    finite = np.isfinite(xy).all(axis=1)
    if not finite.all():
        raise NonFiniteError("bilinear_sample", int(np.flatnonzero(~finite)[0]))

    h, w, _ = fmap.shape
    x, y = xy[:, 0], xy[:, 1]
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xs = np.where(valid, x, 0.0)
    ys = np.where(valid, y, 0.0)
    x0 = np.clip(np.floor(xs), 0, w - 2).astype(np.intp)
    y0 = np.clip(np.floor(ys), 0, h - 2).astype(np.intp)
    x1, y1 = x0 + 1, y0 + 1
    wx, wy = xs - x0, ys - y0
    m = valid.astype(fmap.dtype)

    f = fmap.data
    f00, f01, f10, f11 = f[y0, x0], f[y0, x1], f[y1, x0], f[y1, x1]
    w00 = ((1 - wx) * (1 - wy) * m)[:, None]
    w01 = (wx * (1 - wy) * m)[:, None]
    w10 = ((1 - wx) * wy * m)[:, None]
    w11 = (wx * wy * m)[:, None]
    out = w00 * f00 + w01 * f01 + w10 * f10 + w11 * f11

    def backward(g):
        gmap = np.zeros_like(f)
        np.add.at(gmap, (y0, x0), w00 * g)
        np.add.at(gmap, (y0, x1), w01 * g)
        np.add.at(gmap, (y1, x0), w10 * g)
        np.add.at(gmap, (y1, x1), w11 * g)
        dx = (1 - wy)[:, None] * (f01 - f00) + wy[:, None] * (f11 - f10)
        dy = (1 - wx)[:, None] * (f10 - f00) + wx[:, None] * (f11 - f01)
        gcoords = np.stack([(dx * g).sum(axis=1) * m, (dy * g).sum(axis=1) * m], axis=1)
        return gmap, gcoords

    return _make("bilinear_sample", out, (fmap, coords), backward), valid


# Composites built from the primitives above


def sqrt(a: ArrayLike) -> Tensor:
    return power(a, 0.5)


def softplus(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    return relu(a) + log(1.0 + exp(-abs_(a)))


def linear(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else out + bias


def upsample2x(x: ArrayLike) -> Tensor:
    """Nearest-neighbour 2x upsampling of an (N,C,H,W) tensor."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    tiled = broadcast_to(reshape(x, (n, c, h, 1, w, 1)), (n, c, h, 2, w, 2))
    return reshape(tiled, (n, c, 2 * h, 2 * w))


GRU_KEYS = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")


def gru_cell(hidden: ArrayLike, inputs: ArrayLike, params: Dict[str, Tensor]) -> Tensor:
    """Gated recurrent update ``h' = (1 - z) * h + z * tanh(...)``."""
    h, x = _as_tensor(hidden), _as_tensor(inputs)
    width = h.shape[-1]
    for gate in "zrh":
        w, u, b = params[f"w_{gate}"], params[f"u_{gate}"], params[f"b_{gate}"]
        if (
            h.ndim != 2
            or x.ndim != 2
            or w.shape != (x.shape[-1], width)
            or u.shape != (width, width)
            or b.shape != (width,)
        ):
            raise ShapeError("gru_cell", h.shape, x.shape, w.shape, u.shape)
    z = sigmoid(x @ params["w_z"] + h @ params["u_z"] + params["b_z"])
    r = sigmoid(x @ params["w_r"] + h @ params["u_r"] + params["b_r"])
    candidate = tanh(x @ params["w_h"] + (r * h) @ params["u_h"] + params["b_h"])
    return (1.0 - z) * h + z * candidate


def init_gru_params(
    rng: np.random.Generator, input_width: int, hidden_width: int, prefix: str = ""
) -> Dict[str, Tensor]:
    params = {}
    for gate in "zrh":
        params[f"{prefix}w_{gate}"] = Tensor(
            rng.normal(0.0, np.sqrt(1.0 / input_width), (input_width, hidden_width)),
            requires_grad=True,
        )
        params[f"{prefix}u_{gate}"] = Tensor(
            rng.normal(0.0, np.sqrt(1.0 / hidden_width), (hidden_width, hidden_width)),
            requires_grad=True,
        )
        params[f"{prefix}b_{gate}"] = Tensor(np.zeros(hidden_width), requires_grad=True)
    return params


# Driving the tape


def forward_eval(fn: Callable[..., Any], inputs: Sequence[Tensor]) -> Tuple[Any, Tape]:
    """Evaluate ``fn(*inputs)`` on a fresh tape and return (outputs, tape)."""
    for i, t in enumerate(inputs):
        if t is None:
            raise TapeStateError(f"forward_eval: input {i} is unbound")
    with Tape() as tape:
        outputs = fn(*inputs)
    logger.debug(f"Recorded {len(tape)} primitives")
    return outputs, tape


def backward(
    tape: Tape,
    output: Tensor,
    seed: Optional[np.ndarray] = None,
    inputs: Optional[Sequence[Tensor]] = None,
):
    """Propagate ``seed`` from ``output`` back through ``tape``.

    Returns one gradient per tensor in ``inputs`` (zeros for unused ones) when
    given, otherwise a dict keyed by node id. Leaf tensors that require
    gradients get their ``.grad`` overwritten.
    """
    if not tape.finished:
        raise TapeStateError("backward called before the forward pass completed")
    if seed is None:
        if output.size != 1:
            raise ShapeError("backward", output.shape, ())
        seed = np.ones_like(output.data)
    seed = np.asarray(seed, dtype=output.dtype)
    if seed.shape != output.shape:
        raise ShapeError("backward", seed.shape, output.shape)

    grads: Dict[int, np.ndarray] = {output.node_id: seed}
    for rec in reversed(tape.records):
        g = grads.get(rec.output_id)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            gi = _unbroadcast(np.asarray(gi), t.shape)
            prev = grads.get(t.node_id)
            grads[t.node_id] = gi if prev is None else prev + gi

    produced = {rec.output_id for rec in tape.records}
    for rec in tape.records:
        for t in rec.inputs:
            if t.requires_grad and t.node_id not in produced and t.node_id in grads:
                t.grad = grads[t.node_id]

    if inputs is not None:
        return [grads.get(t.node_id, np.zeros_like(t.data)) for t in inputs]
    return grads


def gradient(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> Tuple[Tensor, List]:
    """Evaluate a scalar ``fn`` and return it with its gradient per input."""
    out, tape = forward_eval(fn, inputs)
    return out, backward(tape, out, inputs=inputs)


def numerical_gradient(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    weights: Optional[np.ndarray] = None,
    h: float = 1e-5,
) -> List[np.ndarray]:
    """Central finite differences of ``sum(fn(*arrays) * weights)``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def value(args):
        out = fn(*[Tensor(a, dtype=np.float64) for a in args]).data
        return float(np.sum(out if weights is None else out * weights))

    result = []
    for k, arr in enumerate(arrays):
        grad = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            saved = arr[idx]
            arr[idx] = saved + h
            plus = value(arrays)
            arr[idx] = saved - h
            minus = value(arrays)
            arr[idx] = saved
            grad[idx] = (plus - minus) / (2 * h)
        result.append(grad)
    return result


def gradient_check(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Relative max deviation between analytic and finite-difference gradients.

    Non-scalar outputs are contracted with fixed random weights first.
    """
    with default_dtype(np.float64):
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        out, tape = forward_eval(fn, tensors)
        weights = np.random.default_rng(seed).standard_normal(out.shape)
        analytic = backward(tape, out, seed=weights, inputs=tensors)
        numeric = numerical_gradient(fn, arrays, weights=weights, h=h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-8)
        worst = max(worst, float(np.abs(a - n).max(initial=0.0) / scale))
    return worst
