"""Minimal dense-tensor core with reverse-mode automatic differentiation.

Everything here is numpy-backed and CPU only. Tensors are immutable after
construction except for gradient accumulation; a graph and its backward pass
belong to one thread, distinct graphs may run concurrently.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float32

# additive surrogate for -inf in attention masks; large enough that exp()
# underflows, small enough not to overflow float32 sums
NEG_MASK = -1e9


class ShapeError(ValueError):
    pass


class _ThreadState(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.softmax_fallbacks = 0


_state = _ThreadState()


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def grad_enabled() -> bool:
    return _state.grad_enabled


def softmax_fallback_count() -> int:
    """Rows that hit the all-masked softmax fallback on this thread."""
    return _state.softmax_fallbacks


def reset_softmax_fallback_count() -> None:
    _state.softmax_fallbacks = 0


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed=None) -> None:
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without seed needs a scalar, got shape {self.shape}"
                )
            seed = np.ones_like(self.data)
        self.grad = np.asarray(seed, dtype=self.data.dtype)
        for node in reversed(_toposort(self)):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # convenience operators; all defer to module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _toposort(root: Tensor) -> list:
    # iterative DFS: graphs can be deeper than the recursion limit
    order, visited, stack = [], set(), [(root, iter(root._prev))]
    visited.add(id(root))
    while stack:
        node, children = stack[-1]
        nxt = next(children, None)
        if nxt is None:
            order.append(node)
            stack.pop()
        elif id(nxt) not in visited:
            visited.add(id(nxt))
            stack.append((nxt, iter(nxt._prev)))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g) -> None:
    # callers hand over g; it is never mutated afterwards, so no copy
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def _make(data: np.ndarray, prev: tuple, backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _state.grad_enabled and any(p.requires_grad for p in prev):
        out.requires_grad = True
        out._prev = prev
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


def pow_(a, p: float) -> Tensor:
    a = _as_tensor(a)
    out = a.data**p

    def backward(g):
        _accumulate(a, g * p * a.data ** (p - 1))

    return _make(out, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out)

    return _make(out, (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accumulate(a, g * out * (1.0 - out))

    return _make(out, (a,), backward)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out * out))

    return _make(out, (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def backward(g):
        _accumulate(a, g * (a.data > 0))

    return _make(out, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    # tanh approximation
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    inner = x * x2
    inner *= 0.044715
    inner += x
    inner *= _GELU_C
    t = np.tanh(inner)
    t += 1.0  # t now holds 1 + tanh(inner)
    out = 0.5 * x * t

    def backward(g):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        da = 0.5 * t + 0.5 * x * (t * (2.0 - t)) * dinner
        _accumulate(a, g * da)

    return _make(out, (a,), backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max_reduce(a, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; gradient is split evenly among tied maxima."""
    a = _as_tensor(a)
    out = a.data.max(axis=axis, keepdims=True)

    def backward(g):
        hit = (a.data == out).astype(a.data.dtype)
        hit /= hit.sum(axis=axis, keepdims=True)
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, g * hit)

    return _make(out if keepdims else out.squeeze(axis), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    inv = np.argsort(axes)

    def backward(g):
        _accumulate(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _make(out, tuple(tensors), backward)


def take_rows(a, index) -> Tensor:
    """Select rows along the first axis; gradients scatter back additively."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    out = a.data[index]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        _accumulate(a, ga)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and network ops


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} x {b.data.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate(a, _unbroadcast(ga, a.data.shape))
        _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), backward)


def linear(x, w, b=None) -> Tensor:
    out = matmul(x, w)
    return add(out, b) if b is not None else out


def masked_softmax(logits, mask=None, axis: int = -1) -> Tensor:
    """Softmax with an optional additive mask of 0 (keep) / NEG_MASK (drop).

    Dropped entries are exactly 0 in the output. A row with every entry
    dropped falls back to unmasked softmax over that row (observable via
    softmax_fallback_count).
    """
    logits = _as_tensor(logits)
    z = logits.data
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=z.dtype)
        m = np.broadcast_to(m, z.shape)
        dropped = m <= NEG_MASK / 2
        all_dropped = dropped.all(axis=axis, keepdims=True)
        n_fallback = int(all_dropped.sum())
        if n_fallback:
            _state.softmax_fallbacks += n_fallback
            dropped = dropped & ~all_dropped
        zmax = np.where(dropped, -np.inf, z).max(axis=axis, keepdims=True)
        e = np.exp(z - zmax)
        e[dropped] = 0.0
    else:
        dropped = None
        e = np.exp(z - z.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(logits, out * (g - dot))

    return _make(out, (logits,), backward)


def layernorm(x, gain, bias, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize along one axis; gain/bias are 1-D of that axis' length."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    ax = axis if axis >= 0 else x.ndim + axis
    n = x.data.shape[ax]
    bshape = [1] * x.ndim
    bshape[ax] = n
    gd = gain.data.reshape(bshape)
    bd = bias.data.reshape(bshape)
    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gd * xhat + bd

    def backward(g):
        other = tuple(i for i in range(x.ndim) if i != ax)
        _accumulate(gain, (g * xhat).sum(axis=other))
        _accumulate(bias, g.sum(axis=other))
        if x.requires_grad:
            dxhat = g * gd
            dx = inv * (
                dxhat
                - dxhat.mean(axis=ax, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=ax, keepdims=True)
            )
            _accumulate(x, dx)

    return _make(out, (x, gain, bias), backward)


def _conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[C,H,W] with w[Co,C,kh,kw]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if not isinstance(stride, int) or stride < 1:
        raise ValueError(f"conv2d: stride must be a positive integer, got {stride!r}")
    if not isinstance(padding, int) or padding < 0:
        raise ValueError(f"conv2d: padding must be a non-negative integer, got {padding!r}")
    cin, h, wd = x.data.shape
    co, cin2, kh, kw = w.data.shape
    if cin != cin2:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {cin2}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} does not fit padded input {h + 2 * padding}x{wd + 2 * padding}"
        )
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(wd, kw, stride, padding)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding)))
    # im2col: (C,Hp,Wp) -> windows (C,ho,wo,kh,kw) -> cols (ho*wo, C*kh*kw)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, cin * kh * kw)
    wmat = w.data.reshape(co, cin * kh * kw).T
    out = cols @ wmat
    if b is not None:
        b = _as_tensor(b)
        out = out + b.data
    out = out.T.reshape(co, ho, wo)

    prev = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(co, ho * wo).T  # (ho*wo, co)
        if b is not None:
            _accumulate(b, g2.sum(axis=0))
        _accumulate(w, (cols.T @ g2).T.reshape(w.data.shape))
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(ho, wo, cin, kh, kw).transpose(2, 3, 4, 0, 1)
            dxp = np.zeros((cin, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
            if padding:
                dxp = dxp[:, padding : padding + h, padding : padding + wd]
            _accumulate(x, dxp)

    return _make(out, prev, backward)


def _bilinear_coeffs(n_out: int, n_in: int, scale: float, dtype):
    # align_corners=False sampling grid, clamped to the border
    src = (np.arange(n_out, dtype=np.float64) + 0.5) / scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    t = (src - lo).astype(dtype)
    return lo, hi, t


def bilinear_upsample(x, factor: int) -> Tensor:
    """align_corners=False bilinear upsampling of x[C,H,W] by an integer factor."""
    x = _as_tensor(x)
    if not isinstance(factor, int) or factor < 1:
        raise ValueError(f"bilinear_upsample: factor must be an integer >= 1, got {factor!r}")
    if factor == 1:
        return add(x, 0.0) if x.requires_grad else Tensor(x.data.copy())
    c, h, w = x.data.shape
    r0, r1, tr = _bilinear_coeffs(h * factor, h, factor, x.data.dtype)
    c0, c1, tc = _bilinear_coeffs(w * factor, w, factor, x.data.dtype)
    tr = tr[:, None]
    top = x.data[:, r0][:, :, c0] * (1 - tc) + x.data[:, r0][:, :, c1] * tc
    bot = x.data[:, r1][:, :, c0] * (1 - tc) + x.data[:, r1][:, :, c1] * tc
    out = top * (1 - tr) + bot * tr

    def backward(g):
        gx = np.zeros_like(x.data)
        gtop = g * (1 - tr)
        gbot = g * tr
        for rows, grows in ((r0, gtop), (r1, gbot)):
            gl = grows * (1 - tc)
            gr = grows * tc
            for ch in range(c):
                np.add.at(gx[ch], (rows[:, None], c0[None, :]), gl[ch])
                np.add.at(gx[ch], (rows[:, None], c1[None, :]), gr[ch])
        _accumulate(x, gx)

    return _make(out, (x,), backward)


def gather_points(x, rows, cols) -> Tensor:
    """Channel vectors of x[C,H,W] at integer (row, col) positions -> (n, C)."""
    x = _as_tensor(x)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = x.data[:, rows, cols].T.copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx.transpose(1, 2, 0), (rows, cols), g)
        _accumulate(x, gx)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, inputs, eps: float = 1e-4) -> float:
    """Max relative error between analytic gradients of the scalar closure f
    and central finite differences, over every element of every input."""
    for t in inputs:
        t.zero_grad()
    out = f()
    if out.data.size != 1:
        raise ShapeError(f"grad_check: closure must be scalar-valued, got {out.shape}")
    out.backward()
    worst = 0.0
    for pi, t in enumerate(inputs):
        analytic = np.zeros_like(t.data) if t.grad is None else np.asarray(t.grad)
        if not t.data.flags["C_CONTIGUOUS"]:
            t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                hi = f().data.reshape(-1)[0]
            flat[i] = orig - eps
            with no_grad():
                lo = f().data.reshape(-1)[0]
            flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            an = float(analytic.reshape(-1)[i])
            if not (math.isfinite(fd) and math.isfinite(an)):
                raise ArithmeticError(
                    f"grad_check: non-finite value at parameter {pi}, element {i} "
                    f"(analytic={an}, fd={fd})"
                )
            err = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
            if err > worst:
                worst = err
    return worst
