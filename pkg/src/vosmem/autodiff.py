"""Reverse-mode autodiff over dense float64 arrays.

The op kit is exactly what the engine's equations need: matmul, softmax,
KL divergence, (strided / dilated) convolution with spatial "same"
padding, spatial max-pooling, concatenation, nearest upsampling and
pointwise arithmetic.  Ops execute eagerly on numpy values; when a
:class:`Tape` is active and an input requires gradients, a backward
closure is appended to the tape.  Tape order is execution order, so the
record is topologically sorted by construction and ``backward`` simply
walks it in reverse.

Without an active tape no graph is built, which is what the streaming
inference path relies on: recurrent state can be carried across
thousands of frames without retaining history.

``finite_diff_grad`` is the central-difference oracle every analytic
backward rule is checked against.
"""

from __future__ import annotations

from itertools import product
from typing import Callable, Sequence

import numpy as np

from .tensor import ContractError, DimensionError, DomainError, tensor

__all__ = [
    "Tape", "Var", "as_var", "parameter", "backward", "finite_diff_grad",
    "add", "sub", "mul", "neg", "scale", "shift", "relu", "log",
    "matmul", "transpose", "reshape", "concat", "slice_axis",
    "sum_all", "sum_axis", "mean_all", "softmax", "log_softmax",
    "kl_divergence", "conv", "maxpool2d", "upsample_nearest",
    "where_mask", "detach",
]

_EPS = 1e-12  # probability floor before any log

_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered op records for one forward/backward pass.

    Single-writer: one pass owns the tape exclusively.  Entering a tape
    while another is active is a contract violation.
    """

    def __init__(self):
        self._nodes: list[tuple[Var, Callable]] = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._nodes)


class Var:
    """A tensor value plus its (lazily allocated) gradient.

    ``grad`` is ``None`` until a backward pass deposits into it; use
    :meth:`grad_or_zeros` when a dense gradient is always wanted.
    """

    __slots__ = ("value", "grad", "requires_grad", "tape")

    def __init__(self, value, requires_grad: bool = False, tape: Tape | None = None):
        self.value = tensor(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def item(self) -> float:
        return float(self.value.reshape(()))

    def grad_or_zeros(self) -> np.ndarray:
        return np.zeros_like(self.value) if self.grad is None else self.grad

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Var":
        return Var(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars allowed where the op kit allows them
    def __add__(self, other):
        return shift(self, other) if np.isscalar(other) else add(self, other)

    def __radd__(self, other):
        return shift(self, other)

    def __sub__(self, other):
        return shift(self, -other) if np.isscalar(other) else sub(self, other)

    def __mul__(self, other):
        return scale(self, other) if np.isscalar(other) else mul(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise DimensionError("only scalar division is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def parameter(value) -> Var:
    """A trainable leaf."""
    return Var(value, requires_grad=True)


def _accum(v: Var, g: np.ndarray):
    if not v.requires_grad:
        return
    v.grad = g.copy() if v.grad is None else v.grad + g


def _make(value, parents: Sequence[Var], backward_fn) -> Var:
    """Wrap an op result, recording ``backward_fn`` if a tape is live."""
    recording = _ACTIVE_TAPE is not None and any(p.requires_grad for p in parents)
    out = Var(value, requires_grad=recording,
              tape=_ACTIVE_TAPE if recording else None)
    if recording:
        _ACTIVE_TAPE._nodes.append((out, backward_fn))
    return out


def backward(loss: Var):
    """Reverse-accumulate d(loss)/d(leaf) for every leaf on the tape."""
    if loss.value.size != 1:
        raise ContractError("backward requires a scalar loss")
    if loss.tape is None:
        raise ContractError("loss was not recorded on a tape")
    loss.grad = np.ones_like(loss.value)
    for out, fn in reversed(loss.tape._nodes):
        if out.grad is not None:
            fn(out.grad)


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     h: float = 1e-5) -> np.ndarray:
    """Central differences (f(x+h e_i) - f(x-h e_i)) / 2h, per coordinate."""
    x = tensor(x)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy(); xp[idx] += h
        xm = x.copy(); xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2.0 * h)
    return g


# ---------------------------------------------------------------------------
# pointwise ops

def _same_shape(a: Var, b: Var, op: str):
    if a.value.shape != b.value.shape:
        raise DimensionError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _same_shape(a, b, "add")

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.value + b.value, (a, b), bwd)


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _same_shape(a, b, "sub")

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.value - b.value, (a, b), bwd)


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value

    def bwd(g):
        _accum(a, g * bv)
        _accum(b, g * av)

    return _make(av * bv, (a, b), bwd)


def neg(a) -> Var:
    a = as_var(a)

    def bwd(g):
        _accum(a, -g)

    return _make(-a.value, (a,), bwd)


def scale(a, s: float) -> Var:
    a = as_var(a)
    s = float(s)

    def bwd(g):
        _accum(a, g * s)

    return _make(a.value * s, (a,), bwd)


def shift(a, c: float) -> Var:
    a = as_var(a)

    def bwd(g):
        _accum(a, g)

    return _make(a.value + float(c), (a,), bwd)


def relu(a) -> Var:
    a = as_var(a)
    mask = a.value > 0  # subgradient 0 at the kink

    def bwd(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.value, 0.0), (a,), bwd)


def log(a) -> Var:
    a = as_var(a)
    if (a.value <= 0).any():
        raise DomainError("log of non-positive value")
    av = a.value

    def bwd(g):
        _accum(a, g / av)

    return _make(np.log(av), (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra / structure

def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"matmul: inner dims differ ({a.value.shape} x {b.value.shape})")
    av, bv = a.value, b.value

    def bwd(g):
        _accum(a, g @ bv.T)
        _accum(b, av.T @ g)

    return _make(av @ bv, (a, b), bwd)


def transpose(a) -> Var:
    a = as_var(a)
    if a.value.ndim != 2:
        raise DimensionError("transpose expects a 2-D operand")

    def bwd(g):
        _accum(a, g.T)

    return _make(a.value.T.copy(), (a,), bwd)


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.value.shape

    def bwd(g):
        _accum(a, g.reshape(old))

    return _make(a.value.reshape(shape).copy(), (a,), bwd)


def concat(a, b, axis: int) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = list(a.value.shape), list(b.value.shape)
    if len(sa) != len(sb):
        raise DimensionError("concat: rank mismatch")
    axis = axis % len(sa)
    sa[axis] = sb[axis] = 0
    if sa != sb:
        raise DimensionError("concat: non-axis dims differ")
    split = a.value.shape[axis]

    def bwd(g):
        ga, gb = np.split(g, [split], axis=axis)
        _accum(a, ga)
        _accum(b, gb)

    return _make(np.concatenate([a.value, b.value], axis=axis), (a, b), bwd)


def slice_axis(a, axis: int, start: int, stop: int) -> Var:
    a = as_var(a)
    axis = axis % a.value.ndim
    sl = [slice(None)] * a.value.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.value)
            full[sl] = g
            _accum(a, full)

    return _make(a.value[sl].copy(), (a,), bwd)


def sum_all(a) -> Var:
    a = as_var(a)
    shp = a.value.shape

    def bwd(g):
        _accum(a, np.broadcast_to(g, shp).copy())

    return _make(a.value.sum(keepdims=False).reshape(()), (a,), bwd)


def sum_axis(a, axis: int, keepdims: bool = False) -> Var:
    a = as_var(a)
    axis = axis % a.value.ndim

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.value.shape).copy())

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def mean_all(a) -> Var:
    a = as_var(a)
    return scale(sum_all(a), 1.0 / a.value.size)


def upsample_nearest(a, factor: int) -> Var:
    """Repeat the last two axes ``factor`` times each."""
    a = as_var(a)
    f = int(factor)
    if f < 1:
        raise DomainError("upsample factor must be >= 1")

    def bwd(g):
        s = g.shape
        pooled = g.reshape(s[:-2] + (s[-2] // f, f, s[-1] // f, f)).sum(axis=(-3, -1))
        _accum(a, pooled)

    return _make(a.value.repeat(f, axis=-2).repeat(f, axis=-1), (a,), bwd)


def where_mask(a, mask: np.ndarray, fill: float) -> Var:
    """Keep entries where ``mask`` holds, replace the rest with ``fill``.

    The mask itself is data, not a differentiable input.
    """
    a = as_var(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.value.shape:
        raise DimensionError("where_mask: mask shape mismatch")

    def bwd(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.value, fill), (a,), bwd)


def detach(a) -> Var:
    return as_var(a).detach()


# ---------------------------------------------------------------------------
# normalization / divergence

def softmax(a, axis: int) -> Var:
    """Stable softmax along ``axis``; -inf entries get exactly zero weight."""
    a = as_var(a)
    axis = axis % a.value.ndim
    x = a.value
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _make(y, (a,), bwd)


def log_softmax(a, axis: int) -> Var:
    a = as_var(a)
    axis = axis % a.value.ndim
    x = a.value
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bwd(g):
        _accum(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), bwd)


def kl_divergence(p, q, axis: int) -> Var:
    """KL(p || q) along ``axis``, averaged over all non-axis positions.

    Zero entries of ``p`` contribute nothing; ``q`` is floored at 1e-12
    before the log so near-zero targets cannot produce -inf.
    """
    p, q = as_var(p), as_var(q)
    _same_shape(p, q, "kl_divergence")
    axis = axis % p.value.ndim
    pv, qv = p.value, q.value
    if (pv < 0).any() or (qv < 0).any():
        raise DomainError("kl_divergence requires nonnegative inputs")
    pt = np.maximum(pv, _EPS)
    qt = np.maximum(qv, _EPS)
    log_ratio = np.log(pt) - np.log(qt)
    m = pv.size // pv.shape[axis]
    val = np.array((pv * log_ratio).sum() / m)

    def bwd(g):
        s = float(g) / m
        _accum(p, s * (log_ratio + (pv > _EPS)))
        _accum(q, -s * (pv / qt) * (qv > _EPS))

    return _make(val, (p, q), bwd)


# ---------------------------------------------------------------------------
# convolution / pooling

def _same_pad(n: int, k: int, stride: int, dilation: int):
    eff = (k - 1) * dilation + 1
    out = -(-n // stride)
    total = max((out - 1) * stride + eff - n, 0)
    return out, total // 2, total - total // 2


def conv(x, w, stride: int = 1, dilation: int = 1) -> Var:
    """Cross-correlation with zero "same" spatial padding.

    ``x`` is (C_in, H, W) or (C_in, T, H, W); ``w`` is (C_out, C_in, kh, kw)
    or (C_out, C_in, kt, kh, kw).  The time axis gets no padding, so a
    kt=2 kernel maps T=2 -> T=1.  Stride and dilation apply spatially.
    """
    x, w = as_var(x), as_var(w)
    squeeze_time = x.value.ndim == 3
    xv = x.value[:, None] if squeeze_time else x.value
    wv = w.value[:, :, None] if w.value.ndim == 4 else w.value
    if xv.ndim != 4 or wv.ndim != 5:
        raise DimensionError("conv expects 3/4-D input and 4/5-D kernel")
    ci, t, h, wd = xv.shape
    co, ci2, kt, kh, kw = wv.shape
    if ci != ci2:
        raise DimensionError(f"conv: channel mismatch ({ci} vs {ci2})")
    to = t - kt + 1
    if to < 1:
        raise DimensionError(f"conv: temporal kernel {kt} exceeds T={t}")
    ho, ph0, ph1 = _same_pad(h, kh, stride, dilation)
    wo, pw0, pw1 = _same_pad(wd, kw, stride, dilation)

    xp = np.pad(xv, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
    cols = np.empty((ci, kt, kh, kw, to, ho, wo))
    for it, ih, iw in product(range(kt), range(kh), range(kw)):
        hs, ws = ih * dilation, iw * dilation
        cols[:, it, ih, iw] = xp[:, it:it + to,
                                 hs:hs + (ho - 1) * stride + 1:stride,
                                 ws:ws + (wo - 1) * stride + 1:stride]
    cols_mat = cols.reshape(ci * kt * kh * kw, to * ho * wo)
    w_mat = wv.reshape(co, ci * kt * kh * kw)
    out = (w_mat @ cols_mat).reshape(co, to, ho, wo)

    def bwd(g):
        g_mat = g.reshape(co, to * ho * wo)
        if w.requires_grad:
            _accum(w, (g_mat @ cols_mat.T).reshape(w.value.shape))
        if x.requires_grad:
            g_cols = (w_mat.T @ g_mat).reshape(cols.shape)
            gxp = np.zeros_like(xp)
            for it, ih, iw in product(range(kt), range(kh), range(kw)):
                hs, ws = ih * dilation, iw * dilation
                gxp[:, it:it + to,
                    hs:hs + (ho - 1) * stride + 1:stride,
                    ws:ws + (wo - 1) * stride + 1:stride] += g_cols[:, it, ih, iw]
            gx = gxp[:, :, ph0:ph0 + h, pw0:pw0 + wd]
            _accum(x, gx[:, 0] if squeeze_time else gx)

    if squeeze_time:
        return _make(out[:, 0], (x, w), lambda g: bwd(g[:, None]))
    return _make(out, (x, w), bwd)


def maxpool2d(x, kernel: int, stride: int) -> Var:
    """Per-window max over the last two axes; leading axes untouched."""
    x = as_var(x)
    xv = x.value
    if xv.ndim < 2:
        raise DimensionError("maxpool2d expects >= 2-D input")
    h, w = xv.shape[-2:]
    if h % stride or w % stride:
        raise DimensionError(f"maxpool2d: dims {h}x{w} not divisible by stride {stride}")
    if (h - kernel) % stride or (w - kernel) % stride:
        raise DimensionError("maxpool2d: kernel/stride do not tile the input")
    win = np.lib.stride_tricks.sliding_window_view(xv, (kernel, kernel), axis=(-2, -1))
    win = win[..., ::stride, ::stride, :, :]
    flat = win.reshape(win.shape[:-2] + (kernel * kernel,))
    arg = flat.argmax(axis=-1)  # first max wins: deterministic routing
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(xv)
        lead = np.indices(arg.shape)
        rows = lead[-2] * stride + arg // kernel
        cols = lead[-1] * stride + arg % kernel
        np.add.at(gx, tuple(lead[:-2]) + (rows, cols), g)
        _accum(x, gx)

    return _make(out, (x,), bwd)
