"""BHViT: four-stage binary hybrid vision transformer."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError
from .layers import (
    BatchNorm,
    BinaryConv3x3,
    BinaryLinear,
    ChannelScale,
    Downsample,
    Linear,
    Module,
    PatchEmbed,
    RPReLU,
    ShiftSpec,
    level_matmul,
    pm1_matmul,
    shift,
)
from .quantizers import QuantParams, binarize_activation, binarize_attention, decomposed_attention

MIXER_MODES = ("hybrid", "pure-attention", "pure-conv", "maxpool")

PRESETS = {
    "tiny": dict(blocks=[2, 2, 6, 2], dims=[64, 128, 256, 512], mlp_ratios=[8, 8, 4, 4],
                 heads=[4, 8], window=7, input_size=224, num_classes=1000),
    "small": dict(blocks=[3, 4, 8, 4], dims=[64, 128, 256, 512], mlp_ratios=[8, 8, 4, 4],
                  heads=[4, 8], window=7, input_size=224, num_classes=1000),
    # desk-scale variant for tests and smoke training
    "micro": dict(blocks=[1, 1, 2, 1], dims=[16, 32, 64, 128], mlp_ratios=[8, 8, 4, 4],
                  heads=[4, 8], window=[4, 4, 4, 2], input_size=64, num_classes=10),
}

CONFIG_KEYS = {"preset", "blocks", "dims", "mlp_ratios", "heads", "window", "mixer_mode", "fdl", "qd",
               "shift", "num_classes", "input_size", "group_width", "qd_levels", "seed"}


@dataclass
class ModelConfig:
    blocks: list[int] = field(default_factory=lambda: [2, 2, 6, 2])
    dims: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    mlp_ratios: list[int] = field(default_factory=lambda: [8, 8, 4, 4])
    # two entries: stages 3-4; four entries: every stage
    heads: list[int] = field(default_factory=lambda: [4, 8])
    window: int | list[int] = 7
    mixer_mode: str = "hybrid"
    fdl: bool = False
    qd: bool = True
    shift: bool = True
    num_classes: int = 1000
    input_size: int = 224
    # channels per group in the MSGDC convolutions
    group_width: int = 16
    qd_levels: int = 3
    seed: int = 0
    preset: str | None = None

    @classmethod
    def preset_config(cls, name: str, **overrides) -> "ModelConfig":
        key = name.lower()
        if key not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        values = dict(PRESETS[key])
        values.update(overrides)
        cfg = cls(preset=key, **values)
        cfg.validate()
        return cfg

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        unknown = set(raw) - CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        raw = dict(raw)
        preset = raw.pop("preset", None)
        if preset:
            return cls.preset_config(preset, **raw)
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ModelConfig":
        text = Path(path).read_text()
        raw = yaml.safe_load(text) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a mapping at top level")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    # -- derived quantities ------------------------------------------------
    def stage_heads(self) -> list[int]:
        if len(self.heads) == 4:
            return list(self.heads)
        early = [max(1, self.heads[0] // 4), max(1, self.heads[0] // 2)]
        return early + list(self.heads)

    def stage_windows(self) -> list[int]:
        if isinstance(self.window, int):
            return [self.window] * 4
        return list(self.window)

    def stage_resolutions(self) -> list[int]:
        r = self.input_size // 4
        return [r, r // 2, r // 4, r // 8]

    def stage_mixers(self) -> list[str]:
        if self.mixer_mode == "hybrid":
            return ["conv", "conv", "attn", "attn"]
        if self.mixer_mode == "pure-attention":
            return ["attn"] * 4
        if self.mixer_mode == "pure-conv":
            return ["conv"] * 4
        raise ConfigError("the max-pooling token mixer is a declared variant only and is not built")

    def validate(self):
        for key in ("blocks", "dims", "mlp_ratios"):
            if len(getattr(self, key)) != 4:
                raise ConfigError(f"{key} needs four entries")
        if len(self.heads) not in (2, 4):
            raise ConfigError("heads needs two (stages 3-4) or four entries")
        if not isinstance(self.window, int) and len(self.window) != 4:
            raise ConfigError("window must be an int or four entries")
        if self.mixer_mode not in MIXER_MODES:
            raise ConfigError(f"mixer_mode must be one of {MIXER_MODES}")
        if self.input_size % 32:
            raise ConfigError(f"input_size {self.input_size} must be divisible by 32")
        if self.qd_levels < 1:
            raise ConfigError("qd_levels must be >= 1")
        for i in range(1, 4):
            if self.dims[i] != 2 * self.dims[i - 1]:
                raise ConfigError("each stage must double the channel count")
        if self.dims[0] % 4:
            raise ConfigError("channel dims must be divisible by 4 for the mix shift")
        if self.mixer_mode == "maxpool":
            return
        res = self.stage_resolutions()
        for stage, (kind, r, w, h, c) in enumerate(
            zip(self.stage_mixers(), res, self.stage_windows(), self.stage_heads(), self.dims)
        ):
            if kind == "attn":
                if r % w:
                    raise ConfigError(f"stage {stage + 1}: resolution {r} not divisible by window {w}")
                if c % h:
                    raise ConfigError(f"stage {stage + 1}: {c} channels not divisible by {h} heads")
            else:
                if c % min(self.group_width, c):
                    raise ConfigError(f"stage {stage + 1}: {c} channels not divisible by group width")


class MSGDC(Module):
    """Three binary grouped 3x3 atrous convs (dilation 1, 3, 5), each with residual + RPReLU, then bn of the sum."""

    DILATIONS = (1, 3, 5)

    def __init__(self, channels: int, groups: int, rng):
        self.convs = [BinaryConv3x3(channels, groups, d, rng) for d in self.DILATIONS]
        self.acts = [RPReLU(channels) for _ in self.DILATIONS]
        self.norm = BatchNorm(channels)

    def forward(self, x):
        total = None
        for conv, act in zip(self.convs, self.acts):
            h = act(conv(x) + x)
            total = h if total is None else total + h
        return self.norm(total)


class QKVProjection(Module):
    """``RPReLU(bn(BinaryLinear(X)) + X)``."""

    def __init__(self, channels: int, rng):
        self.linear = BinaryLinear(channels, channels, rng)
        self.norm = BatchNorm(channels)
        self.act = RPReLU(channels)

    def forward(self, x):
        return self.act(self.norm(self.linear(x)) + x)


class MSMHA(Module):
    """Window attention whose tokens are one window plus every pooled window summary."""

    def __init__(self, channels: int, heads: int, window: int, rng, qd: bool = True, qd_levels: int = 3):
        self.channels, self.heads, self.window = channels, heads, window
        self.qd, self.qd_levels = qd, qd_levels
        self.q = QKVProjection(channels, rng)
        self.k = QKVProjection(channels, rng)
        self.v = QKVProjection(channels, rng)
        self.q_act = QuantParams.create(channels)
        self.k_act = QuantParams.create(channels)
        self.v_act = QuantParams.create(channels)
        if not qd:
            self.attn_quant = QuantParams.create(1, scale=0.5, bias=0.0)
        # populated on each forward for inspection
        self.last_attention: np.ndarray | None = None

    def tokens(self, h: int, w: int) -> tuple[int, int]:
        n_win = (h // self.window) * (w // self.window)
        return n_win, self.window * self.window + n_win

    def forward(self, x):
        b, h, w, c = x.shape
        ws = self.window
        if h % ws or w % ws:
            raise ConfigError(f"feature map {h}x{w} not divisible by window {ws}")
        nh, nw = h // ws, w // ws
        n_win, t = self.tokens(h, w)
        high = ag.avg_pool2d(x, ws).reshape(b, 1, n_win, c)
        high = ag.broadcast_to(high, (b, n_win, n_win, c))
        win = x.reshape(b, nh, ws, nw, ws, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, n_win, ws * ws, c)
        hidden = ag.concat([win, high], axis=2)  # [B, nW, T, C]

        q, k, v = self.q(hidden), self.k(hidden), self.v(hidden)
        nh_, dh = self.heads, c // self.heads

        def heads(z):
            return z.reshape(b, n_win, t, nh_, dh).transpose(0, 1, 3, 2, 4)

        qb = heads(binarize_activation(q, self.q_act))
        kb = heads(binarize_activation(k, self.k_act))
        vb = heads(binarize_activation(v, self.v_act))
        scores = pm1_matmul(qb, kb.transpose(0, 1, 2, 4, 3)) * np.float32(1.0 / math.sqrt(dh))
        attn = ag.softmax(scores, axis=-1)
        self.last_attention = attn.data
        if self.qd:
            levels = decomposed_attention(attn, self.qd_levels)
            mixed = level_matmul(levels, vb, self.qd_levels)
        else:
            mixed = ag.matmul(binarize_attention(attn, self.attn_quant), vb)
        mixed = mixed.transpose(0, 1, 3, 2, 4).reshape(b, n_win, t, c)
        out = mixed + q + k + v

        win_part, high_part = ag.split(out, [ws * ws, n_win], axis=2)
        win_map = win_part.reshape(b, nh, nw, ws, ws, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)
        high_map = high_part.mean(axis=1).reshape(b, nh, nw, c)
        return win_map + ag.upsample_nearest(high_map, ws)


class BinaryMLP(Module):
    """Expand/contract binary MLP with repeat/pool shortcuts and a shift branch."""

    def __init__(self, channels: int, ratio: int, rng, use_shift: bool = True):
        self.channels, self.ratio, self.use_shift = channels, ratio, use_shift
        self.fc1 = BinaryLinear(channels, channels * ratio, rng)
        self.norm1 = BatchNorm(channels * ratio)
        self.act1 = RPReLU(channels * ratio)
        self.fc2 = BinaryLinear(channels * ratio, channels, rng)
        self.norm2 = BatchNorm(channels)
        self.act2 = RPReLU(channels)
        if use_shift:
            self.shift_specs = [ShiftSpec(kind, k) for k in (1, 2) for kind in ("horizontal", "vertical", "mix")]
            self.shift_scales = [ChannelScale(channels) for _ in self.shift_specs]

    def forward(self, x):
        r = self.ratio
        h1 = self.act1(self.norm1(self.fc1(x)) + repeat(x, r))
        h2 = self.act2(self.norm2(self.fc2(h1)) + channel_pool(h1, r))
        if not self.use_shift:
            return h2
        out = h2
        for spec, scale in zip(self.shift_specs, self.shift_scales):
            out = out + scale(shift(x, spec))
        return out


def repeat(x, times: int) -> Tensor:
    """Concatenate ``times`` copies of ``x`` along channels."""
    return ag.repeat_channels(x, times)


def channel_pool(x, times: int) -> Tensor:
    """Average the ``times`` channel blocks produced by :func:`repeat`."""
    c = x.shape[-1] // times
    return x.reshape(*x.shape[:-1], times, c).mean(axis=-2)


class Block(Module):
    def __init__(self, mixer: Module, mlp: BinaryMLP):
        self.mixer = mixer
        self.mlp = mlp

    def forward(self, x):
        h = self.mixer(x) + x
        return self.mlp(h) + h


class BHViT(Module):
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        mixers = config.stage_mixers()
        res = config.stage_resolutions()
        self.patch_embed = PatchEmbed(3, config.dims[0], (res[0], res[0]), rng)
        self.stages: list[list[Block]] = []
        self.downsamples = []
        blocks = []
        for s in range(4):
            c = config.dims[s]
            if s > 0:
                self.downsamples.append(Downsample(config.dims[s - 1], c, rng, full_precision=config.fdl))
            for _ in range(config.blocks[s]):
                if mixers[s] == "conv":
                    mixer = MSGDC(c, c // min(config.group_width, c), rng)
                else:
                    mixer = MSMHA(c, config.stage_heads()[s], config.stage_windows()[s], rng,
                                  qd=config.qd, qd_levels=config.qd_levels)
                blocks.append(Block(mixer, BinaryMLP(c, config.mlp_ratios[s], rng, use_shift=config.shift)))
            self.stages.append(blocks[-config.blocks[s]:] if config.blocks[s] else [])
        self.blocks = blocks
        self.norm = BatchNorm(config.dims[3])
        self.head = Linear(config.dims[3], config.num_classes, rng)

    def features(self, images) -> Tensor:
        x = self.patch_embed(ag.as_tensor(images))
        for s in range(4):
            if s > 0:
                x = self.downsamples[s - 1](x)
            for blk in self.stages[s]:
                x = blk(x)
        return self.norm(x)

    def forward(self, images) -> Tensor:
        """``images``: ``[B, H, W, 3]`` float32 -> logits ``[B, num_classes]``."""
        x = self.features(images)
        pooled = x.mean(axis=(1, 2))
        return self.head(pooled)

    def binary_weights(self) -> list[tuple[str, Tensor]]:
        """Latent weights of every binarized layer, by parameter name."""
        out = []
        for name, p in self.named_parameters():
            if name.endswith("weight") and _is_binary_owner(self, name):
                out.append((name, p))
        return out

    def quantizer_scales(self) -> list[Tensor]:
        return [p for name, p in self.named_parameters() if name.endswith(".a")]


def _is_binary_owner(model: Module, name: str) -> bool:
    obj = model
    for part in name.split(".")[:-1]:
        obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
    if isinstance(obj, Downsample):
        return not obj.full_precision
    return isinstance(obj, (BinaryLinear, BinaryConv3x3))


# -- operation counting ---------------------------------------------------------
@dataclass
class OpsReport:
    bops: int
    flops: int
    binary_params: int
    real_params: int
    breakdown: dict = field(default_factory=dict)

    @property
    def ops(self) -> float:
        return self.bops / 64 + self.flops

    @property
    def param_bits(self) -> int:
        return self.binary_params + 32 * self.real_params

    @property
    def size_bytes(self) -> float:
        return self.param_bits / 8

    @property
    def size_mb(self) -> float:
        return self.size_bytes / 1e6

    def as_dict(self) -> dict:
        return {
            "bops": self.bops,
            "flops": self.flops,
            "ops": self.ops,
            "binary_params": self.binary_params,
            "real_params": self.real_params,
            "param_bits": self.param_bits,
            "size_bytes": self.size_bytes,
            "size_mb": self.size_mb,
        }


class _Counter:
    def __init__(self):
        self.bops = 0
        self.flops = 0
        self.bin_params = 0
        self.real_params = 0
        self.parts: dict[str, dict] = {}

    def add(self, part: str, bops=0, flops=0, bin_params=0, real_params=0):
        self.bops += bops
        self.flops += flops
        self.bin_params += bin_params
        self.real_params += real_params
        d = self.parts.setdefault(part, {"bops": 0, "flops": 0, "binary_params": 0, "real_params": 0})
        d["bops"] += bops
        d["flops"] += flops
        d["binary_params"] += bin_params
        d["real_params"] += real_params


def count_ops(config: ModelConfig, input_size: int | None = None) -> OpsReport:
    """Analytic operation and size count for one image.

    Binary multiply-accumulates count as BOPs; real multiply-accumulates,
    softmax exponentials and decomposition threshold comparisons count as
    FLOPs. Binary weights take one bit each; every real parameter (including
    per-channel weight scales) takes 32 bits.
    """
    size = input_size or config.input_size
    if size != config.input_size:
        config = dataclasses.replace(config, input_size=size)
    config.validate()
    cnt = _Counter()
    r0 = size // 4
    c0 = config.dims[0]
    # stem conv + bn + position embedding
    cnt.add("stem", flops=r0 * r0 * 48 * c0, real_params=48 * c0 + c0 + 2 * c0 + r0 * r0 * c0)
    mixers = config.stage_mixers()
    res = config.stage_resolutions()
    for s in range(4):
        c, r = config.dims[s], res[s]
        hw = r * r
        if s > 0:
            cin = config.dims[s - 1]
            macs = hw * 4 * cin * c
            if config.fdl:
                cnt.add("downsample", flops=macs, real_params=4 * cin * c + c + 2 * c)
            else:
                cnt.add("downsample", bops=macs, bin_params=4 * cin * c, real_params=2 * cin + c + 2 * c)
        for _ in range(config.blocks[s]):
            if mixers[s] == "conv":
                g = c // min(config.group_width, c)
                cg = c // g
                # three convs, each 9*cg inputs per output channel
                cnt.add("msgdc", bops=3 * hw * 9 * cg * c, bin_params=3 * 9 * cg * c,
                        real_params=3 * (c + 2 * c + 3 * c) + 2 * c)
            else:
                w = config.stage_windows()[s]
                heads = config.stage_heads()[s]
                n_win = hw // (w * w)
                t = w * w + n_win
                tokens = n_win * t
                dh = c // heads
                cnt.add("msmha_qkv", bops=3 * tokens * c * c, bin_params=3 * c * c,
                        real_params=3 * (2 * c + c + 2 * c + 3 * c) + 3 * 2 * c)
                score_bops = n_win * heads * t * t * dh
                mix_bops = n_win * heads * t * t * dh
                softmax_flops = n_win * heads * t * t
                if config.qd:
                    s_lv = config.qd_levels
                    cnt.add("msmha_attn", bops=score_bops + s_lv * mix_bops,
                            flops=softmax_flops + s_lv * n_win * heads * t * t)
                else:
                    cnt.add("msmha_attn", bops=score_bops + mix_bops, flops=2 * softmax_flops, real_params=2)
            ratio = config.mlp_ratios[s]
            shift_params = 6 * 2 * c if config.shift else 0
            cnt.add("mlp", bops=2 * hw * c * c * ratio, bin_params=2 * c * c * ratio,
                    real_params=(c + c * ratio) + (c * ratio + c)  # activation quantizers
                    + (ratio * c + c)  # weight scales
                    + 2 * (ratio * c) + 2 * c  # batch norms
                    + 3 * (ratio * c) + 3 * c  # RPReLUs
                    + shift_params,
                    flops=(6 * hw * c if config.shift else 0))
    c3 = config.dims[3]
    cnt.add("head", flops=c3 * config.num_classes, real_params=2 * c3 + c3 * config.num_classes + config.num_classes)
    return OpsReport(cnt.bops, cnt.flops, cnt.bin_params, cnt.real_params, cnt.parts)
