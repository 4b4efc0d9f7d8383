"""Binarization functions with straight-through backward rules.

* activations: shifted sign with a piecewise-polynomial surrogate gradient
* weights: per-output-channel mean magnitude times sign
* attention: scaled round/clip to {0, a}
* attention quantization decomposition into ``s`` nested {0,1} masks
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Parameter, Tensor, _make, _unbroadcast, as_tensor
from .bitpack import MaskMatrix, pack_mask
from .errors import DomainError, ShapeError

ALPHA_FLOOR = 1e-12
ATTN_SLACK = 1e-6


@dataclass
class QuantParams:
    """Learnable per-channel scale ``a`` (> 0) and bias ``b``."""

    a: Tensor
    b: Tensor

    @classmethod
    def create(cls, channels: int, scale: float = 1.0, bias: float = 0.0) -> "QuantParams":
        return cls(
            Parameter(np.full(channels, scale, dtype=np.float32)),
            Parameter(np.full(channels, bias, dtype=np.float32)),
        )

    def check(self):
        if np.any(self.a.data <= 0):
            raise DomainError("quantizer scale a must be positive")

    def parameters(self):
        return [self.a, self.b]


def sign(x: np.ndarray) -> np.ndarray:
    """Sign with ``sign(0) = +1``."""
    return np.where(x >= 0, 1.0, -1.0).astype(x.dtype, copy=False)


def activation_ste_factor(u: np.ndarray) -> np.ndarray:
    """Surrogate derivative of sign at normalized input ``u = (x - b) / a``."""
    return np.where(
        (u >= -1) & (u < 0),
        2 + 2 * u,
        np.where((u >= 0) & (u < 1), 2 - 2 * u, 0.0),
    ).astype(u.dtype, copy=False)


def binarize_activation(x, p: QuantParams | None = None) -> Tensor:
    """``sign((x - b) / a)`` forward; ``upstream * (2 -+ 2u)`` on ``[b - a, b + a)`` backward.

    The surrogate is taken as the derivative with respect to ``x - b``, so
    ``b`` receives its negation and ``a`` receives ``-u`` times it.
    """
    x = as_tensor(x)
    if p is None:
        a = as_tensor(np.ones(1, dtype=np.float32))
        b = as_tensor(np.zeros(1, dtype=np.float32))
    else:
        p.check()
        a, b = p.a, p.b
    xd, ad, bd = x.data, a.data, b.data
    u = (xd - bd) / ad
    out = sign(u)

    def bw(g):
        gu = g * activation_ste_factor(u)
        gx = gu
        ga = gb = None
        if b.requires_grad:
            gb = _unbroadcast(-gu, b.shape)
        if a.requires_grad:
            ga = _unbroadcast(-gu * u, a.shape)
        return gx, ga, gb

    return _make(out, (x, a, b), bw)


def weight_scale(w: np.ndarray) -> np.ndarray:
    """Per-output-channel scale: mean of ``|W[:, k]|`` over all leading axes."""
    axes = tuple(range(w.ndim - 1))
    return np.maximum(np.abs(w).mean(axis=axes), ALPHA_FLOOR).astype(w.dtype, copy=False)


def weight_ste_mask(w: np.ndarray) -> np.ndarray:
    return ((w > -1) & (w < 1)).astype(w.dtype)


def binarize_weight(w) -> Tensor:
    """``alpha_k * sign(W[:, k])`` with backward ``upstream * alpha_k * 1{-1 < W < 1}``.

    The last axis indexes output channels.
    """
    w = as_tensor(w)
    if not np.all(np.isfinite(w.data)):
        raise DomainError("weights must be finite")
    alpha = weight_scale(w.data)
    mask = weight_ste_mask(w.data)
    out = alpha * sign(w.data)
    return _make(out, (w,), lambda g: (g * alpha * mask,))


def weight_signs(w) -> Tensor:
    """``sign(W)`` with backward ``upstream * 1{-1 < W < 1}``.

    ``(X @ weight_signs(W)) * alpha`` has the same forward and backward as
    ``X @ binarize_weight(W)`` while keeping the matmul in exact integers.
    """
    w = as_tensor(w)
    mask = weight_ste_mask(w.data)
    return _make(sign(w.data), (w,), lambda g: (g * mask,))


def binarize_attention(attn, p: QuantParams | None = None, a: float | None = None, b: float | None = None) -> Tensor:
    """``a * clip(round((A - b) / a), 0, 1)``; backward ``a * upstream`` on ``[b, a + b)``.

    ``a`` receives ``upstream * level``, ``b`` the negated input gradient.
    """
    attn = as_tensor(attn)
    ad = attn.data
    if ad.size and (ad.min() < -ATTN_SLACK or ad.max() > 1 + ATTN_SLACK):
        raise DomainError("attention values must lie in [0, 1]")
    if p is not None:
        p.check()
        at, bt = p.a, p.b
    else:
        at = as_tensor(np.asarray(1.0 if a is None else a, dtype=np.float32))
        bt = as_tensor(np.asarray(0.0 if b is None else b, dtype=np.float32))
        if np.any(at.data <= 0):
            raise DomainError("attention scale a must be positive")
    sa, sb = at.data, bt.data
    level = np.clip(np.round((ad - sb) / sa), 0, 1)
    out = sa * level
    inside = ((ad >= sb) & (ad < sa + sb)).astype(ad.dtype)

    def bw(g):
        gx = g * sa * inside
        ga = _unbroadcast(g * level, at.shape) if at.requires_grad else None
        # b shifts the input, so it takes the negated input gradient
        gb = _unbroadcast(-gx, bt.shape) if bt.requires_grad else None
        return gx, ga, gb

    return _make(out, (attn, at, bt), bw)


@dataclass
class AttentionDecomposition:
    """``s`` nested {0,1} masks whose elementwise sum is ``clip(round(s*A), 0, s)``."""

    s: int
    masks: list[MaskMatrix] = field(default_factory=list)

    def dense(self) -> np.ndarray:
        """Stacked masks ``[s, t, t]`` as int8."""
        return np.stack([m.unpack() for m in self.masks])

    def level_sum(self) -> np.ndarray:
        return self.dense().sum(axis=0)


def decompose_levels(attn: np.ndarray, s: int) -> np.ndarray:
    """Dense masks ``[s, ...]``: mask ``sigma`` is ``round(s*A) >= sigma - 0.5``."""
    if s < 1:
        raise DomainError(f"scale constant s must be >= 1, got {s}")
    r = np.round(s * np.asarray(attn))
    sig = np.arange(1, s + 1, dtype=r.dtype).reshape((s,) + (1,) * r.ndim)
    return (r[None] >= sig - 0.5).astype(np.int8)


def quantization_decompose(attn, s: int = 3) -> AttentionDecomposition:
    """Split a ``[t x t]`` attention matrix in [0, 1] into ``s`` packed masks."""
    ad = np.asarray(attn.data if isinstance(attn, Tensor) else attn)
    if s < 1:
        raise DomainError(f"scale constant s must be >= 1, got {s}")
    if ad.ndim != 2:
        raise ShapeError(f"expected a 2-D attention matrix, got {ad.shape}")
    if ad.size and (ad.min() < -ATTN_SLACK or ad.max() > 1 + ATTN_SLACK):
        raise DomainError("attention values must lie in [0, 1]")
    levels = decompose_levels(ad, s)
    return AttentionDecomposition(s, [pack_mask(m) for m in levels])


def decompose_backward(upstream, attn, s: int) -> np.ndarray:
    """Straight-through gradient of the mask sum: ``s * upstream`` where 0 <= A <= 1."""
    up = np.asarray(upstream)
    ad = np.asarray(attn)
    if up.shape != ad.shape:
        raise ShapeError(f"upstream {up.shape} does not match attention {ad.shape}")
    inside = (ad >= 0) & (ad <= 1)
    return np.where(inside, s * up, 0.0).astype(up.dtype, copy=False)


def decomposed_attention(attn, s: int = 3) -> Tensor:
    """Differentiable mask sum ``sum_sigma A^sigma`` (integer levels 0..s)."""
    attn = as_tensor(attn)
    ad = attn.data
    if s < 1:
        raise DomainError(f"scale constant s must be >= 1, got {s}")
    level = decompose_levels(ad, s).sum(axis=0)
    return _make(level, (attn,), lambda g: (decompose_backward(g, ad, s),))
