"""Fast self-checks runnable from the command line, grouped into suites."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from . import bitpack
from .layers import bit_kernels
from .model import BHViT, ModelConfig, count_ops
from .quantizers import (
    activation_ste_factor,
    binarize_attention,
    decompose_levels,
    quantization_decompose,
    weight_ste_mask,
)


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str
    seconds: float


def _pm1(rng, shape):
    return np.where(rng.random(shape) < 0.5, -1, 1).astype(np.int8)


# -- bitpack ---------------------------------------------------------------------
def check_gemm(rng) -> tuple[bool, str]:
    bad = 0
    for _ in range(100):
        m, k, p = rng.integers(1, 65), rng.integers(1, 257), rng.integers(1, 65)
        a, b = _pm1(rng, (m, k)), _pm1(rng, (k, p))
        got = bitpack.xnor_gemm(bitpack.pack(a), bitpack.pack(b))
        bad += not np.array_equal(got, a.astype(np.float64) @ b.astype(np.float64))
    return bad == 0, f"{bad} mismatches in 100 random cases"


def check_pack_roundtrip(rng) -> tuple[bool, str]:
    bad = 0
    for _ in range(100):
        a = _pm1(rng, (rng.integers(1, 20), rng.integers(1, 200)))
        bm = bitpack.pack(a)
        bad += not (np.array_equal(bitpack.unpack(bm), a) and bm.padding_is_zero())
    return bad == 0, f"{bad} failures in 100 roundtrips"


def check_mask_aggregate(rng) -> tuple[bool, str]:
    bad = 0
    for _ in range(50):
        t, d = rng.integers(1, 40), rng.integers(1, 70)
        mask = (rng.random((t, t)) < 0.4).astype(np.int8)
        v = _pm1(rng, (t, d))
        got = bitpack.mask_aggregate(bitpack.pack_mask(mask), bitpack.pack(v))
        bad += not np.array_equal(got, mask.astype(np.int64) @ v)
    return bad == 0, f"{bad} mismatches in 50 cases"


def check_dilated_conv(rng) -> tuple[bool, str]:
    bad = 0
    for d in (1, 3, 5):
        for g in (1, 2, 4):
            c = 8
            x = _pm1(rng, (2, 7, 6, c))
            w = _pm1(rng, (3, 3, c // g, c)).astype(np.float32)
            ref = ag.conv2d(ag.as_tensor(x.astype(np.float32)), ag.as_tensor(w), dilation=d, groups=g,
                            padding=d).data
            wg = w.astype(np.int8).reshape(9, c // g, g, c // g).transpose(2, 0, 1, 3).reshape(g, 9 * (c // g), c // g)
            got = bitpack.binary_dilated_conv(x, wg, d, g)
            bad += not np.array_equal(got, ref)
    return bad == 0, f"{bad} mismatches over dilations (1,3,5) x groups (1,2,4)"


# -- quantizers ------------------------------------------------------------------
def check_qd_identity(rng) -> tuple[bool, str]:
    grid = np.round(np.arange(101) / 100, 2)
    fails = 0
    for s in (1, 3, 7):
        levels = decompose_levels(grid, s)
        fails += int(np.count_nonzero(levels.sum(0) != np.clip(np.round(s * grid), 0, s)))
        fails += int(np.count_nonzero(levels[1:] > levels[:-1]))
        dec = quantization_decompose(grid.reshape(1, -1), s)
        fails += int(np.count_nonzero(dec.level_sum()[0] != levels.sum(0)))
    return fails == 0, f"{fails} grid failures for s in (1,3,7)"


def check_ste_factors(rng) -> tuple[bool, str]:
    u = np.array([-1.5, -1, -0.5, 0, 0.5, 1, 1.5])
    f = activation_ste_factor(u)
    ok_act = np.array_equal(f, [0, 0, 1, 2, 1, 0, 0])
    a, b = 0.5, 0.2
    attn = np.array([0.0, 0.19, 0.2, 0.45, 0.69, 0.7, 1.0])
    t = ag.Tensor(attn, requires_grad=True)
    binarize_attention(t, a=a, b=b).backward(np.ones_like(attn))
    ok_att = np.array_equal(t.grad, np.where((attn >= b) & (attn < a + b), a, 0.0).astype(np.float32))
    w = np.array([-1.5, -1.0, -0.999, 0.0, 0.999, 1.0, 1.5])
    ok_w = np.array_equal(weight_ste_mask(w), [0, 0, 1, 1, 1, 0, 0])
    return ok_act and ok_att and ok_w, f"activation={ok_act} attention={ok_att} weight={ok_w}"


# -- model -----------------------------------------------------------------------
def check_bit_path(rng) -> tuple[bool, str]:
    model = BHViT(ModelConfig.preset_config("micro", seed=int(rng.integers(1 << 30))))
    model.eval()
    x = rng.normal(size=(4, 64, 64, 3)).astype(np.float32)
    with ag.no_grad():
        dense = model(x).data
    with bit_kernels():
        bits = model(x).data
    return bool(np.array_equal(dense, bits)), f"max |diff| {float(np.abs(dense - bits).max()):.3g}"


def check_ops_counter(rng) -> tuple[bool, str]:
    rep = count_ops(ModelConfig.preset_config("small"))
    fdl = count_ops(ModelConfig.preset_config("small", fdl=True))
    ok = abs(rep.ops / 0.8e8 - 1) <= 0.2 and abs(fdl.ops / 1.5e8 - 1) <= 0.2
    return ok, f"small OPs {rep.ops / 1e8:.3f}e8, FDL {fdl.ops / 1e8:.3f}e8"


def check_softmax_rows(rng) -> tuple[bool, str]:
    x = ag.as_tensor(rng.normal(size=(5, 65, 65)).astype(np.float32) * 4)
    err = float(np.abs(ag.softmax(x, axis=-1).data.sum(-1) - 1).max())
    return err < 1e-5, f"max row-sum error {err:.2e}"


SUITES: dict[str, list[tuple[str, Callable]]] = {
    "bitpack": [
        ("xnor_gemm == float GEMM", check_gemm),
        ("pack/unpack roundtrip", check_pack_roundtrip),
        ("mask_aggregate == masked sum", check_mask_aggregate),
        ("dilated conv lowering", check_dilated_conv),
    ],
    "quant": [
        ("decomposition identity and nesting", check_qd_identity),
        ("straight-through factors", check_ste_factors),
    ],
    "model": [
        ("bit kernels == dense path", check_bit_path),
        ("softmax rows sum to 1", check_softmax_rows),
        ("OPs counter", check_ops_counter),
    ],
}


def run(suite: str = "all", seed: int = 0) -> list[CheckResult]:
    names = list(SUITES) if suite == "all" else [suite]
    results = []
    for name in names:
        if name not in SUITES:
            raise KeyError(f"unknown suite {name!r}")
        for label, fn in SUITES[name]:
            rng = np.random.default_rng(seed)
            t0 = time.perf_counter()
            try:
                ok, detail = fn(rng)
            except Exception as exc:  # report, do not abort the table
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            results.append(CheckResult(name, label, bool(ok), detail, time.perf_counter() - t0))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results) if results else 10
    lines = [f"{'suite':8} {'check':{width}} result  detail"]
    for r in results:
        lines.append(f"{r.suite:8} {r.name:{width}} {'PASS' if r.passed else 'FAIL':6}  {r.detail}")
    return "\n".join(lines)
