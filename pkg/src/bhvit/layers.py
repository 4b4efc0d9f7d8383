"""Layers: module plumbing, binary linear/conv, RPReLU, shifts, stem, downsampling.

All feature maps are channel-last, ``[B, H, W, C]``; token tensors are
``[..., T, C]``. Binary layers have two forward routes: dense emulation with
+-1 float matmuls (differentiable) and, inside :func:`bit_kernels`, packed
xnor/popcount kernels. Both produce identical float32 outputs because the
integer accumulation is exact in either route and the per-channel scale is
applied afterwards.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import bitpack
from .autograd import Parameter, Tensor
from .errors import ConfigError, ShapeError
from .quantizers import QuantParams, binarize_activation, weight_scale, weight_signs

_mode = threading.local()


def bits_enabled() -> bool:
    return getattr(_mode, "bits", False)


@contextlib.contextmanager
def bit_kernels():
    """Run binary layers through the packed kernels (inference only, no graph)."""
    prev = bits_enabled()
    _mode.bits = True
    try:
        with ag.no_grad():
            yield
    finally:
        _mode.bits = prev


class Module:
    """Minimal parameter container; attributes are discovered in insertion order."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for name, val in vars(self).items():
            if isinstance(val, (Module, QuantParams)):
                yield name, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((prefix + name, val))
        for name, child in self._children():
            if isinstance(child, QuantParams):
                out.append((f"{prefix}{name}.a", child.a))
                out.append((f"{prefix}{name}.b", child.b))
            else:
                out.extend(child.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = [(prefix + n, v) for n, v in getattr(self, "_buffers", {}).items()]
        for name, child in self._children():
            if isinstance(child, Module):
                out.extend(child.named_buffers(f"{prefix}{name}."))
        return out

    def modules(self):
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class BatchNorm(Module):
    """Batch norm over all axes but the last (eps 1e-5, momentum 0.1)."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.weight = Parameter(np.ones(channels, dtype=np.float32))
        self.bias = Parameter(np.zeros(channels, dtype=np.float32))
        self._buffers = {
            "running_mean": np.zeros(channels, dtype=np.float32),
            "running_var": np.ones(channels, dtype=np.float32),
        }
        self.eps = eps
        self.momentum = momentum

    def forward(self, x):
        return ag.batch_norm(
            x, self.weight, self.bias,
            self._buffers["running_mean"], self._buffers["running_var"],
            self.training, self.momentum, self.eps,
        )


class RPReLU(Module):
    """``prelu(x - gamma, slope) + zeta`` with per-channel learnable terms."""

    def __init__(self, channels: int, slope: float = 0.25):
        self.shift_in = Parameter(np.zeros(channels, dtype=np.float32))
        self.slope = Parameter(np.full(channels, slope, dtype=np.float32))
        self.shift_out = Parameter(np.zeros(channels, dtype=np.float32))

    def forward(self, x):
        return ag.prelu(x - self.shift_in, self.slope) + self.shift_out


class ChannelScale(Module):
    """Learnable channel-wise affine map, initialised to the identity."""

    def __init__(self, channels: int):
        self.scale = Parameter(np.ones(channels, dtype=np.float32))
        self.bias = Parameter(np.zeros(channels, dtype=np.float32))

    def forward(self, x):
        return x * self.scale + self.bias


class Linear(Module):
    """Full-precision linear layer."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_uniform(rng, (cin, cout), cin))
        self.bias = Parameter(_uniform(rng, (cout,), cin)) if bias else None

    def forward(self, x):
        y = ag.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


def pm1_matmul(a: Tensor, b: Tensor) -> Tensor:
    """Product of two +-1 tensors ``[..., m, k] @ [..., k, n]``.

    Under :func:`bit_kernels` every matrix pair goes through ``xnor_gemm_nt``.
    """
    if not bits_enabled():
        return ag.matmul(a, b)
    ad, bd = a.data, b.data
    lead = np.broadcast_shapes(ad.shape[:-2], bd.shape[:-2])
    ad = np.broadcast_to(ad, lead + ad.shape[-2:]).reshape(-1, *ad.shape[-2:])
    bd = np.broadcast_to(bd, lead + bd.shape[-2:]).reshape(-1, *bd.shape[-2:])
    out = np.empty((ad.shape[0], ad.shape[1], bd.shape[2]), dtype=np.int64)
    for i in range(ad.shape[0]):
        out[i] = bitpack.xnor_gemm_nt(bitpack.pack(ad[i]), bitpack.pack(np.ascontiguousarray(bd[i].T)))
    return Tensor(out.reshape(lead + out.shape[-2:]).astype(np.float32))


def level_matmul(levels: Tensor, b: Tensor, s: int) -> Tensor:
    """Product of integer attention levels in ``0..s`` with a +-1 tensor.

    Under :func:`bit_kernels` the levels are decomposed into ``s`` nested
    masks and each mask is aggregated with ``mask_aggregate``.
    """
    if not bits_enabled():
        return ag.matmul(levels, b)
    ld, bd = levels.data, b.data
    lead = np.broadcast_shapes(ld.shape[:-2], bd.shape[:-2])
    ld = np.broadcast_to(ld, lead + ld.shape[-2:]).reshape(-1, *ld.shape[-2:])
    bd = np.broadcast_to(bd, lead + bd.shape[-2:]).reshape(-1, *bd.shape[-2:])
    out = np.zeros((ld.shape[0], ld.shape[1], bd.shape[2]), dtype=np.int64)
    for i in range(ld.shape[0]):
        vb = bitpack.pack(bd[i])
        for sigma in range(1, s + 1):
            mask = bitpack.pack_mask((ld[i] >= sigma).astype(np.int8))
            out[i] += bitpack.mask_aggregate(mask, vb)
    return Tensor(out.reshape(lead + out.shape[-2:]).astype(np.float32))


class BinaryLinear(Module):
    """``alpha * (sign(W) (x) B_a(X))`` with latent weight ``[in, out]``."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.cin, self.cout = cin, cout
        self.weight = Parameter(_uniform(rng, (cin, cout), cin))
        self.act = QuantParams.create(cin)
        self.frozen_alpha: np.ndarray | None = None

    def alpha(self) -> np.ndarray:
        return self.frozen_alpha if self.frozen_alpha is not None else weight_scale(self.weight.data)

    def forward(self, x):
        if x.shape[-1] != self.cin:
            raise ShapeError(f"BinaryLinear expects {self.cin} input features, got {x.shape[-1]}")
        xb = binarize_activation(x, self.act)
        alpha = self.alpha()
        if bits_enabled():
            flat = xb.data.reshape(-1, self.cin)
            wt = bitpack.pack(np.ascontiguousarray(np.where(self.weight.data >= 0, 1, -1).T))
            ints = bitpack.xnor_gemm_nt(bitpack.pack(flat.astype(np.int8)), wt)
            y = ints.astype(np.float32).reshape(*xb.shape[:-1], self.cout)
            return Tensor(y * alpha)
        return ag.matmul(xb, weight_signs(self.weight)) * alpha


class BinaryConv3x3(Module):
    """Binary 3x3 grouped atrous convolution, zero padding keeps H x W."""

    def __init__(self, channels: int, groups: int, dilation: int, rng: np.random.Generator):
        if channels % groups:
            raise ConfigError(f"channels {channels} not divisible by groups {groups}")
        self.channels, self.groups, self.dilation = channels, groups, dilation
        cg = channels // groups
        self.weight = Parameter(_uniform(rng, (3, 3, cg, channels), 9 * cg))
        self.act = QuantParams.create(channels)
        self.frozen_alpha: np.ndarray | None = None

    def alpha(self) -> np.ndarray:
        return self.frozen_alpha if self.frozen_alpha is not None else weight_scale(self.weight.data)

    def forward(self, x):
        if x.shape[-1] != self.channels:
            raise ShapeError(f"BinaryConv3x3 expects {self.channels} channels, got {x.shape[-1]}")
        xb = binarize_activation(x, self.act)
        alpha = self.alpha()
        d, g = self.dilation, self.groups
        if bits_enabled():
            cg = self.channels // g
            cgo = self.channels // g
            signs = np.where(self.weight.data >= 0, 1, -1).astype(np.int8)
            wg = signs.reshape(9, cg, g, cgo).transpose(2, 0, 1, 3).reshape(g, 9 * cg, cgo)
            ints = bitpack.binary_dilated_conv(xb.data.astype(np.int8), wg, d, g)
            return Tensor(ints.astype(np.float32) * alpha)
        return ag.conv2d(xb, weight_signs(self.weight), stride=1, dilation=d, groups=g, padding=d) * alpha


class Downsample(Module):
    """2x2 stride-2 convolution doubling channels, then batch norm.

    Binary by default; ``full_precision`` keeps the convolution real-valued.
    """

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, full_precision: bool = False):
        self.cin, self.cout = cin, cout
        self.full_precision = full_precision
        self.weight = Parameter(_uniform(rng, (2, 2, cin, cout), 4 * cin))
        if full_precision:
            self.conv_bias = Parameter(np.zeros(cout, dtype=np.float32))
        else:
            self.act = QuantParams.create(cin)
        self.norm = BatchNorm(cout)
        self.frozen_alpha: np.ndarray | None = None

    def alpha(self) -> np.ndarray:
        return self.frozen_alpha if self.frozen_alpha is not None else weight_scale(self.weight.data)

    def forward(self, x):
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ConfigError(f"downsampling needs even spatial dims, got {h}x{w}")
        if self.full_precision:
            y = ag.conv2d(x, self.weight, stride=2) + self.conv_bias
            return self.norm(y)
        xb = binarize_activation(x, self.act)
        alpha = self.alpha()
        if bits_enabled():
            patches = xb.data.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(-1, 4 * c)
            signs = np.where(self.weight.data >= 0, 1, -1).reshape(4 * c, self.cout)
            ints = bitpack.xnor_gemm_nt(bitpack.pack(patches.astype(np.int8)), bitpack.pack(np.ascontiguousarray(signs.T)))
            y = Tensor(ints.astype(np.float32).reshape(b, h // 2, w // 2, self.cout) * alpha)
        else:
            y = ag.conv2d(xb, weight_signs(self.weight), stride=2) * alpha
        return self.norm(y)


class PatchEmbed(Module):
    """Full-precision 4x4 stride-4 stem: ``gelu(bn(conv(I))) + P_e``."""

    def __init__(self, in_chans: int, dim: int, grid: tuple[int, int], rng: np.random.Generator):
        self.weight = Parameter(_uniform(rng, (4, 4, in_chans, dim), 16 * in_chans))
        self.conv_bias = Parameter(np.zeros(dim, dtype=np.float32))
        self.norm = BatchNorm(dim)
        self.pos_embed = Parameter(np.zeros((grid[0], grid[1], dim), dtype=np.float32))

    def forward(self, img):
        b, h, w, _ = img.shape
        if h % 4 or w % 4:
            raise ConfigError(f"image size {h}x{w} not divisible by 4")
        if (h // 4, w // 4) != self.pos_embed.shape[:2]:
            raise ShapeError(f"image {h}x{w} does not match position grid {self.pos_embed.shape[:2]}")
        y = ag.conv2d(img, self.weight, stride=4) + self.conv_bias
        return ag.gelu(self.norm(y)) + self.pos_embed


SHIFT_KINDS = ("horizontal", "vertical", "mix")
MIX_ORDER = ("left", "right", "up", "down")


@dataclass(frozen=True)
class ShiftSpec:
    kind: str
    stride: int = 1
    order: tuple[str, ...] = MIX_ORDER

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ConfigError(f"unknown shift kind {self.kind!r}")
        if sorted(self.order) != sorted(MIX_ORDER):
            raise ConfigError(f"mix order must be a permutation of {MIX_ORDER}")


# neighbour direction -> (axis, roll amount per unit stride); "left" reads column w - k
_NEIGHBOUR_ROLL = {"left": (2, 1), "right": (2, -1), "up": (1, 1), "down": (1, -1)}


def shift(x, spec: ShiftSpec) -> Tensor:
    """Circular spatial shift of a ``[B, H, W, C]`` map.

    horizontal/vertical: the first ``k`` columns/rows move to the end.
    mix: channel quarter ``q`` is read from neighbour ``spec.order[q]`` at distance ``k``.
    """
    x = ag.as_tensor(x)
    k = spec.stride
    if spec.kind == "horizontal":
        return ag.roll(x, -k, axis=2)
    if spec.kind == "vertical":
        return ag.roll(x, -k, axis=1)
    c = x.shape[-1]
    if c % 4:
        raise ConfigError(f"mix shift needs channels divisible by 4, got {c}")
    q = c // 4
    parts = ag.split(x, [q, q, q, q], axis=3)
    moved = []
    for part, direction in zip(parts, spec.order):
        axis, sgn = _NEIGHBOUR_ROLL[direction]
        moved.append(ag.roll(part, sgn * k, axis=axis))
    return ag.concat(moved, axis=3)
