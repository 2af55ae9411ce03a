"""Reverse-mode automatic differentiation on top of numpy arrays.

Operations executed inside an active :class:`Tape` are recorded in execution
order; :meth:`Tape.backward` replays their backward rules in reverse.  Outside
a tape every operation is a plain numpy computation and results carry no
gradient history, which is how inference runs.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

DEFAULT_DTYPE = np.float32
RNG_ALGORITHM = "philox4x64-10"

# Set to False to skip the per-op finiteness scan (about one extra pass over
# every output).
CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox generator; identical streams on every platform."""
    return np.random.Generator(np.random.Philox(int(seed)))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; all of these route through the recorded ops below
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

_TAPES: list["Tape"] = []

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; the innermost active tape receives records.
    A tape can be replayed exactly once.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        if _TAPES and _TAPES[-1] is self:
            _TAPES.pop()
        elif self in _TAPES:
            _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise RuntimeError("tape was already replayed; record a new one")
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ValueError("loss is not connected to any tensor requiring grad")
        self.consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, parents, rule in reversed(self.records):
            g = out.grad
            if g is None:
                continue
            for parent, pg in zip(parents, rule(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=parent.data.dtype, copy=True)
                else:
                    parent.grad += pg


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _emit(data: np.ndarray, parents: tuple[Tensor, ...], rule: BackwardFn, op: str) -> Tensor:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        tape.records.append((out, parents, rule))
        return out
    return Tensor(data)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------

def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit(x.data * x.dtype.type(s), (x,), lambda g: (g * s,), "scale")


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def elementwise(op: str, a, b) -> Tensor:
    """Pointwise ``add``/``sub``/``mul``; shapes must match unless one side is a scalar."""
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def add(a, b) -> Tensor:
    if _is_scalar(b) and isinstance(a, Tensor):
        return _emit(a.data + a.dtype.type(b), (a,), lambda g: (g,), "add")
    if _is_scalar(a) and isinstance(b, Tensor):
        return add(b, a)
    a, b = _binary_operands(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    if _is_scalar(b) and isinstance(a, Tensor):
        return add(a, -b)
    if _is_scalar(a) and isinstance(b, Tensor):
        return add(scale(b, -1.0), a)
    a, b = _binary_operands(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    if _is_scalar(b) and isinstance(a, Tensor):
        return scale(a, b)
    if _is_scalar(a) and isinstance(b, Tensor):
        return scale(b, a)
    a, b = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data

    def rule(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit(ad * bd, (a, b), rule, "mul")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast (numpy rules); the only non-scalar broadcasting op."""
    shape = tuple(shape)
    src = x.shape
    return _emit(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _emit(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(xd)
    return _emit(y, (x,), lambda g: (g / xd,), "log")


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast like numpy."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ _swap_last(bd), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(_swap_last(ad) @ g, bd.shape)
        return ga, gb

    return _emit(ad @ bd, (a, b), rule, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``; weight is [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight in-features {weight.shape[1]}")
    xd, wd = x.data, weight.data
    y = xd @ wd.T
    if bias is not None:
        y = y + bias.data
    def rule(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ wd) if x.requires_grad else None
        gw = (g2.T @ xd.reshape(-1, xd.shape[-1])) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _emit(y, parents, rule, "linear")


# --------------------------------------------------------------------------
# shape manipulation
# --------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def _basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    src_shape, dtype = x.shape, x.dtype
    basic = _basic_index(index)

    def rule(g):
        out = np.zeros(src_shape, dtype=dtype)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    data = x.data[index]
    return _emit(np.array(data, copy=True), (x,), rule, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty list")
    nd = tensors[0].ndim
    ax = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ValueError(f"concat: off-axis extents differ, {ref} vs {t.shape} (axis {axis})")
    if len(tensors) == 1:
        return _emit(tensors[0].data.copy(), (tensors[0],), lambda g: (g,), "concat")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), rule, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("stack of an empty list")
    ax = axis % (tensors[0].ndim + 1)

    def rule(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _emit(np.stack([t.data for t in tensors], axis=ax), tuple(tensors), rule, "stack")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _emit(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), rule, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _emit(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),), "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * xd.dtype.type(_INV_SQRT2)))

    def rule(g):
        pdf = np.exp(-0.5 * xd * xd) * xd.dtype.type(_INV_SQRT2PI)
        return (g * (cdf + xd * pdf),)

    return _emit(xd * cdf, (x,), rule, "gelu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_np(x.data)
    return _emit(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    s = _softmax_np(x.data, axis)
    return _emit(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def rule(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _emit(y, (x,), rule, "log_softmax")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    d = xd.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layernorm: affine params must have shape ({d},)")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gain.data

    def rule(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        return gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return _emit(xhat * gd + bias.data, (x, gain, bias), rule, "layernorm")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return _emit(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# --------------------------------------------------------------------------
# convolution and pooling (NCHW; a missing batch axis is added and removed)
# --------------------------------------------------------------------------

def _with_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")
    return x, False


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid (unpadded) stride-1 cross-correlation."""
    x, squeeze = _with_batch(x)
    n, c, h, w = x.shape
    co, ci, kh, kw = kernels.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, kernels expect {ci}")
    if h < kh or w < kw:
        raise ValueError(f"conv2d: input {h}x{w} smaller than kernel {kh}x{kw}")
    ho, wo = h - kh + 1, w - kw + 1
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))  # n c ho wo kh kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kd = kernels.data.reshape(co, -1)
    y = (cols @ kd.T + bias.data).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)

    def rule(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gk = (g2.T @ cols).reshape(kernels.shape) if kernels.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ kd).reshape(n, ho, wo, c, kh, kw)
            gx = np.zeros(x.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + ho, j:j + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gx, gk, gb

    out = _emit(np.ascontiguousarray(y), (x, kernels, bias), rule, "conv2d")
    return reshape(out, out.shape[1:]) if squeeze else out


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Max pooling; gradient goes to the first maximum in row-major window order."""
    x, squeeze = _with_batch(x)
    n, c, h, w = x.shape
    if h < window or w < window:
        raise ValueError(f"maxpool2d: input {h}x{w} smaller than window {window}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    if stride == window:
        blocks = x.data[:, :, :ho * window, :wo * window].reshape(n, c, ho, window, wo, window)
        flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, window * window)
    else:
        win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
        flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        hit = (np.arange(window * window) == arg[..., None]) * g[..., None]
        gx = np.zeros(x.shape, dtype=x.dtype)
        if stride == window:
            blocks_g = hit.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
            gx[:, :, :ho * window, :wo * window] = blocks_g.reshape(n, c, ho * window, wo * window)
        else:
            hit = hit.reshape(n, c, ho, wo, window, window)
            for i in range(window):
                for j in range(window):
                    gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += hit[..., i, j]
        return (gx,)

    out = _emit(np.ascontiguousarray(y), (x,), rule, "maxpool2d")
    return reshape(out, out.shape[1:]) if squeeze else out


def global_maxpool(x: Tensor) -> Tensor:
    """Max over all spatial positions: [N,C,H,W] -> [N,C] (or [C,H,W] -> [C])."""
    x, squeeze = _with_batch(x)
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        gx = (np.arange(h * w) == arg[..., None]) * g[..., None]
        return (gx.reshape(x.shape).astype(x.dtype, copy=False),)

    out = _emit(y, (x,), rule, "global_maxpool")
    return reshape(out, (c,)) if squeeze else out


def custom_op(data: np.ndarray, parents: Iterable[Tensor], rule: BackwardFn, name: str) -> Tensor:
    """Record an op whose forward was computed elsewhere (fused kernels)."""
    return _emit(data, tuple(parents), rule, name)
