"""Dense tensors with a small reverse-mode differentiation engine.

Every differentiable operation records its parents and a backward closure.
Nodes carry a creation index, so sorting the reachable nodes by decreasing
index replays the forward tape in reverse; each node is visited once.
Data is float32 unless a :func:`default_dtype` context says otherwise.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DomainError, ShapeError

_ids = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


def _dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in this thread."""
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def default_dtype(dtype):
    """Run ops in ``dtype`` (used by :func:`grad_check` to evaluate in float64)."""
    prev = _dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "name")
    # make ``ndarray <op> Tensor`` dispatch to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_dtype())
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._id = next(_ids)
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- backward ----------------------------------------------------------
    def backward(self, grad=None, retain_graph: bool = False):
        if grad is None:
            if self.size != 1:
                raise DomainError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient {grad.shape} does not match output {self.shape}")

        seen = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in seen:
                continue
            seen[node._id] = node
            stack.extend(p for p in node._parents if p.requires_grad)
        tape = sorted(seen.values(), key=lambda n: n._id, reverse=True)

        self.grad = grad if self.grad is None else self.grad + grad
        for node in tape:
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.shape:
                    raise ShapeError(f"gradient shape {g.shape} != value shape {parent.shape}")
                parent.grad = g if parent.grad is None else parent.grad + g
            if not retain_graph:
                node._backward = None
                node._parents = ()
                if node is not self:
                    node.grad = None

    # -- operators ---------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def Parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float32), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data).astype(_dtype(), copy=False)
    out.grad = None
    out.name = None
    out._id = next(_ids)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise -------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, a.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    return _make(
        ad / bd,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * ad / (bd * bd), b.shape) if b.requires_grad else None,
        ),
    )


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))

    def bw(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, (a,), bw)


def prelu(a, slope) -> Tensor:
    """``x`` if ``x > 0`` else ``slope * x``; ``slope`` broadcasts (per channel)."""
    a, slope = as_tensor(a), as_tensor(slope)
    x, s = a.data, slope.data
    pos = x > 0
    return _make(
        np.where(pos, x, s * x),
        (a, slope),
        lambda g: (
            np.where(pos, g, g * s),
            _unbroadcast(np.where(pos, 0.0, g * x), slope.shape) if slope.requires_grad else None,
        ),
    )


# -- reductions / shape ops -------------------------------------------------
def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise DomainError("mean over an empty tensor")
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(out, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def split(a, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Split along ``axis`` into pieces of the given sizes."""
    a = as_tensor(a)
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to {a.shape[axis]}")
    outs = []
    start = 0
    for n in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + n)
        outs.append(getitem(a, tuple(idx)))
        start += n
    return outs


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), bw)


def pad(a, widths) -> Tensor:
    """Zero padding with ``np.pad``-style ``widths``."""
    a = as_tensor(a)
    out = np.pad(a.data, widths)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _make(out, (a,), lambda g: (g[sl],))


def repeat_channels(a, times: int) -> Tensor:
    """Concatenate ``times`` copies along the last axis."""
    a = as_tensor(a)
    out = np.concatenate([a.data] * times, axis=-1)
    c = a.shape[-1]
    return _make(out, (a,), lambda g: (g.reshape(*g.shape[:-1], times, c).sum(axis=-2),))


def roll(a, shift: int, axis: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.roll(a.data, shift, axis=axis), (a,), lambda g: (np.roll(g, -shift, axis=axis),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from exc
    return _make(np.ascontiguousarray(out), (a,), lambda g: (_unbroadcast(g, a.shape),))


# -- linear algebra ----------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError(f"matmul: batch dims differ {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise DomainError("softmax over an empty axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise DomainError("log_softmax over an empty axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    return _make(out, (a,), lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


# -- convolution / pooling / normalisation (channel-last) --------------------
def _im2col(x: np.ndarray, kh, kw, stride, dilation, padding):
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {kh}x{kw}")
    taps = []
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * dilation, j * dilation
            taps.append(xp[:, y0 : y0 + stride * (ho - 1) + 1 : stride, x0 : x0 + stride * (wo - 1) + 1 : stride, :])
    return np.stack(taps, axis=3), ho, wo  # [B, Ho, Wo, kh*kw, C]


def conv2d(x, w, stride: int = 1, dilation: int = 1, groups: int = 1, padding: int = 0) -> Tensor:
    """Channel-last convolution.

    ``x``: ``[B, H, W, Cin]``; ``w``: ``[kh, kw, Cin/groups, Cout]``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
    b, h, wd, cin = x.shape
    kh, kw, cg, cout = w.shape
    if cin % groups or cout % groups or cin // groups != cg:
        raise ShapeError(f"conv2d: weight {w.shape} incompatible with Cin={cin}, groups={groups}")
    cgo = cout // groups
    cols, ho, wo = _im2col(x.data, kh, kw, stride, dilation, padding)
    k = kh * kw
    # [g, N, k*cg]
    colg = cols.reshape(b * ho * wo, k, groups, cg).transpose(2, 0, 1, 3).reshape(groups, -1, k * cg)
    wg = w.data.reshape(k, cg, groups, cgo).transpose(2, 0, 1, 3).reshape(groups, k * cg, cgo)
    outg = np.matmul(colg, wg)  # [g, N, cgo]
    out = outg.transpose(1, 0, 2).reshape(b, ho, wo, cout)

    def bw(g):
        gg = g.reshape(-1, groups, cgo).transpose(1, 0, 2)  # [g, N, cgo]
        gx = gw = None
        if w.requires_grad:
            gwg = np.matmul(np.swapaxes(colg, 1, 2), gg)  # [g, k*cg, cgo]
            gw = gwg.reshape(groups, k, cg, cgo).transpose(1, 2, 0, 3).reshape(kh, kw, cg, cout)
        if x.requires_grad:
            gcol = np.matmul(gg, np.swapaxes(wg, 1, 2))  # [g, N, k*cg]
            gcol = gcol.reshape(groups, b, ho, wo, k, cg).transpose(1, 2, 3, 4, 0, 5).reshape(b, ho, wo, k, cin)
            gxp = np.zeros((b, h + 2 * padding, wd + 2 * padding, cin), dtype=g.dtype)
            t = 0
            for i in range(kh):
                for j in range(kw):
                    y0, x0 = i * dilation, j * dilation
                    gxp[:, y0 : y0 + stride * (ho - 1) + 1 : stride, x0 : x0 + stride * (wo - 1) + 1 : stride, :] += gcol[:, :, :, t, :]
                    t += 1
            gx = gxp[:, padding : padding + h, padding : padding + wd, :]
        return gx, gw

    return _make(out, (x, w), bw)


def avg_pool2d(x, kernel: int) -> Tensor:
    """Non-overlapping ``kernel x kernel`` average pooling, channel-last."""
    x = as_tensor(x)
    b, h, w, c = x.shape
    if h % kernel or w % kernel:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {kernel}")
    out = x.data.reshape(b, h // kernel, kernel, w // kernel, kernel, c).mean(axis=(2, 4))

    def bw(g):
        g = np.repeat(np.repeat(g, kernel, axis=1), kernel, axis=2)
        return (g / (kernel * kernel),)

    return _make(out, (x,), bw)


def upsample_nearest(x, factor: int) -> Tensor:
    x = as_tensor(x)
    b, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)
    return _make(out, (x,), lambda g: (g.reshape(b, h, factor, w, factor, c).sum(axis=(2, 4)),))


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Normalise over every axis but the last; running stats update in place when training."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = tuple(range(x.ndim - 1))
    xd = x.data
    if training:
        n = xd.size // xd.shape[-1]
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        unbiased = var * n / max(n - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu) * inv
        out = xhat * gamma.data + beta.data

        def bw(g):
            dxhat = g * gamma.data
            gx = (inv / n) * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return _make(out, (x, gamma, beta), bw)

    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (xd - running_mean) * inv
    out = xhat * gamma.data + beta.data
    return _make(
        out,
        (x, gamma, beta),
        lambda g: (g * gamma.data * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)),
    )


# -- custom gradients ---------------------------------------------------------
def custom_grad(forward_fn: Callable, backward_fn: Callable) -> Callable:
    """Build a differentiable op from a forward and an explicit backward rule.

    ``forward_fn(*arrays) -> array``; ``backward_fn(upstream, *arrays) -> grad``
    (or a tuple with one gradient per input, ``None`` for no gradient). The
    backward rule is applied verbatim; ``forward_fn`` is never differentiated.
    """

    def op(*inputs) -> Tensor:
        ts = [as_tensor(t) for t in inputs]
        arrays = [t.data for t in ts]
        out = forward_fn(*arrays)

        def bw(g):
            grads = backward_fn(g, *arrays)
            if not isinstance(grads, tuple):
                grads = (grads,)
            if len(grads) != len(ts):
                raise ShapeError(f"backward rule returned {len(grads)} gradients for {len(ts)} inputs")
            fixed = []
            for t, gi in zip(ts, grads):
                if gi is None:
                    fixed.append(None)
                    continue
                gi = np.asarray(gi, dtype=g.dtype)
                if gi.shape != t.shape:
                    raise ShapeError(f"backward rule gave gradient {gi.shape} for input {t.shape}")
                fixed.append(gi)
            return tuple(fixed)

        return _make(out, ts, bw)

    return op


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-3) -> float:
    """Max relative error between autograd and central differences.

    Error per element is ``|analytic - numeric| / max(1, |analytic|)``.
    Evaluated in float64 so the result reflects truncation, not float32 roundoff.
    """
    with default_dtype(np.float64):
        x0 = np.array(x, dtype=np.float64)
        xt = Tensor(x0.copy(), requires_grad=True)
        y = f(xt)
        if y.size != 1:
            raise DomainError(f"grad_check needs a scalar-valued function, got shape {y.shape}")
        y.backward()
        analytic = np.zeros_like(x0) if xt.grad is None else xt.grad
        numeric = np.empty_like(x0)
        flat = x0.reshape(-1)
        num_flat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(Tensor(x0)).data)
                flat[i] = orig - eps
                fm = float(f(Tensor(x0)).data)
                flat[i] = orig
                num_flat[i] = (fp - fm) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
