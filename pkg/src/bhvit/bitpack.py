"""Bit-packed binary linear algebra.

Layout: row-major, 64-bit little-endian words, LSB-first within a word.
Logical element ``j`` of a row lives in word ``j // 64`` at bit ``j % 64``.
Padding bits past ``cols`` are always zero.

Two encodings share this layout:

* ``BitMatrix``  bit 1 -> +1, bit 0 -> -1
* ``MaskMatrix`` bit 1 -> 1,  bit 0 -> 0
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

WORD_BITS = 64
# Upper bound on the temporary xor buffer built per GEMM chunk.
_CHUNK_BYTES = 1 << 24

__all__ = [
    "WORD_BITS",
    "BitMatrix",
    "MaskMatrix",
    "pack",
    "unpack",
    "pack_mask",
    "unpack_mask",
    "pack_ternary",
    "xnor_dot",
    "xnor_gemm",
    "xnor_gemm_nt",
    "masked_xnor_gemm_nt",
    "mask_aggregate",
    "dilated_gather",
    "tap_validity",
    "binary_dilated_conv",
]


def n_words(cols: int) -> int:
    return (cols + WORD_BITS - 1) // WORD_BITS


def _pack_bits(bits: np.ndarray) -> np.ndarray:
    rows, cols = bits.shape
    nw = n_words(cols)
    packed = np.packbits(bits.astype(np.uint8, copy=False), axis=1, bitorder="little")
    buf = np.zeros((rows, nw * 8), dtype=np.uint8)
    buf[:, : packed.shape[1]] = packed
    return buf.view("<u8").astype(np.uint64, copy=False).reshape(rows, nw)


def _unpack_bits(words: np.ndarray, cols: int) -> np.ndarray:
    rows = words.shape[0]
    as_bytes = np.ascontiguousarray(words.astype("<u8", copy=False)).view(np.uint8)
    bits = np.unpackbits(as_bytes.reshape(rows, -1), axis=1, bitorder="little")
    return bits[:, :cols]


@dataclass(frozen=True)
class BitMatrix:
    """Packed +-1 matrix. ``words`` has shape ``(rows, ceil(cols / 64))``."""

    rows: int
    cols: int
    words: np.ndarray

    def __post_init__(self):
        if self.words.dtype != np.uint64 or self.words.shape != (self.rows, n_words(self.cols)):
            raise ShapeError(
                f"word storage {self.words.shape}/{self.words.dtype} does not match "
                f"{self.rows}x{self.cols}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def row(self, i: int) -> "BitMatrix":
        return type(self)(1, self.cols, self.words[i : i + 1])

    def unpack(self) -> np.ndarray:
        return unpack(self)

    def transpose(self) -> "BitMatrix":
        return pack(unpack(self).T)

    def padding_is_zero(self) -> bool:
        tail = self.cols % WORD_BITS
        if tail == 0 or self.rows == 0:
            return True
        keep = np.uint64((1 << tail) - 1)
        return bool(np.all((self.words[:, -1] & ~keep) == 0))


@dataclass(frozen=True)
class MaskMatrix(BitMatrix):
    """Packed {0,1} matrix sharing the ``BitMatrix`` layout."""

    def unpack(self) -> np.ndarray:
        return unpack_mask(self)

    def transpose(self) -> "MaskMatrix":
        return pack_mask(unpack_mask(self).T)

    def popcounts(self) -> np.ndarray:
        return np.bitwise_count(self.words).sum(axis=1, dtype=np.int64)


def pack(values) -> BitMatrix:
    """Pack a 2-D array of +-1 values."""
    v = np.asarray(values)
    if v.ndim != 2:
        raise ShapeError(f"pack expects a 2-D array, got shape {v.shape}")
    pos = v == 1
    if not np.all(pos | (v == -1)):
        raise DomainError("pack expects every element to be -1 or +1")
    return BitMatrix(v.shape[0], v.shape[1], _pack_bits(pos))


def unpack(m: BitMatrix) -> np.ndarray:
    """Inverse of :func:`pack`; returns int8 +-1 values."""
    bits = _unpack_bits(m.words, m.cols)
    return (bits.astype(np.int8) * 2 - 1).astype(np.int8)


def pack_mask(values) -> MaskMatrix:
    v = np.asarray(values)
    if v.ndim != 2:
        raise ShapeError(f"pack_mask expects a 2-D array, got shape {v.shape}")
    one = v == 1
    if not np.all(one | (v == 0)):
        raise DomainError("pack_mask expects every element to be 0 or 1")
    return MaskMatrix(v.shape[0], v.shape[1], _pack_bits(one))


def unpack_mask(m: MaskMatrix) -> np.ndarray:
    return _unpack_bits(m.words, m.cols).astype(np.int8)


def pack_ternary(values) -> tuple[BitMatrix, MaskMatrix]:
    """Split a {-1,0,+1} matrix into a sign plane and a nonzero mask.

    Zeros become sign bit 0 and mask bit 0, so masked kernels ignore them.
    """
    v = np.asarray(values)
    if v.ndim != 2:
        raise ShapeError(f"pack_ternary expects a 2-D array, got shape {v.shape}")
    if not np.all((v == 1) | (v == 0) | (v == -1)):
        raise DomainError("pack_ternary expects values in {-1, 0, +1}")
    signs = BitMatrix(v.shape[0], v.shape[1], _pack_bits(v == 1))
    valid = MaskMatrix(v.shape[0], v.shape[1], _pack_bits(v != 0))
    return signs, valid


def xnor_dot(a: BitMatrix, b: BitMatrix) -> int:
    """+-1 dot product of two packed rows: ``2p - n``, p = popcount(xnor(a, b)).

    Padding bits are zero in both operands, so they never count as mismatches
    and ``p = n - popcount(a ^ b)``.
    """
    if a.rows != 1 or b.rows != 1:
        raise ShapeError("xnor_dot expects single-row operands")
    if a.cols != b.cols:
        raise ShapeError(f"length mismatch: {a.cols} vs {b.cols}")
    n = a.cols
    mismatches = int(np.bitwise_count(a.words[0] ^ b.words[0]).sum())
    p = n - mismatches
    return 2 * p - n


def _row_chunk(other_rows: int, nw: int) -> int:
    per_row = max(1, other_rows * nw * 8)
    return max(1, _CHUNK_BYTES // per_row)


def xnor_gemm_nt(a: BitMatrix, bt: BitMatrix) -> np.ndarray:
    """``A @ Bt.T`` for packed operands sharing the inner dimension.

    Returns an int64 ``(a.rows, bt.rows)`` matrix.
    """
    if a.cols != bt.cols:
        raise ShapeError(f"inner dimensions differ: {a.cols} vs {bt.cols}")
    k = a.cols
    out = np.empty((a.rows, bt.rows), dtype=np.int64)
    step = _row_chunk(bt.rows, bt.words.shape[1])
    for start in range(0, a.rows, step):
        blk = a.words[start : start + step]
        x = blk[:, None, :] ^ bt.words[None, :, :]
        mism = np.bitwise_count(x).sum(axis=2, dtype=np.int64)
        out[start : start + step] = k - 2 * mism
    return out


def xnor_gemm(a: BitMatrix, b: BitMatrix) -> np.ndarray:
    """Integer product of packed ``A [m x k]`` and ``B [k x p]``."""
    if a.cols != b.rows:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return xnor_gemm_nt(a, b.transpose())


def masked_xnor_gemm_nt(a: BitMatrix, valid: MaskMatrix, bt: BitMatrix) -> np.ndarray:
    """Like :func:`xnor_gemm_nt` but only positions with ``valid`` set contribute.

    ``out[i, j] = popcount(valid_i) - 2 * popcount(valid_i & (a_i ^ bt_j))``,
    the dot product of a {-1,0,+1} row with a +-1 row.
    """
    if a.shape != valid.shape:
        raise ShapeError(f"sign plane {a.shape} and mask {valid.shape} differ")
    if a.cols != bt.cols:
        raise ShapeError(f"inner dimensions differ: {a.cols} vs {bt.cols}")
    out = np.empty((a.rows, bt.rows), dtype=np.int64)
    counts = valid.popcounts()
    step = _row_chunk(bt.rows, bt.words.shape[1])
    for start in range(0, a.rows, step):
        blk = a.words[start : start + step]
        vm = valid.words[start : start + step]
        x = (blk[:, None, :] ^ bt.words[None, :, :]) & vm[:, None, :]
        mism = np.bitwise_count(x).sum(axis=2, dtype=np.int64)
        out[start : start + step] = counts[start : start + step, None] - 2 * mism
    return out


def mask_aggregate(m: MaskMatrix, v: BitMatrix) -> np.ndarray:
    """Sum of the +-1 rows of ``V`` selected by each row of the {0,1} mask ``M``.

    ``out[i, j] = 2 * popcount(M_i & Vcol_j) - popcount(M_i)``.
    """
    if m.cols != v.rows:
        raise ShapeError(f"mask {m.shape} incompatible with values {v.shape}")
    vt = v.transpose()
    out = np.empty((m.rows, v.cols), dtype=np.int64)
    counts = m.popcounts()
    step = _row_chunk(vt.rows, vt.words.shape[1])
    for start in range(0, m.rows, step):
        mw = m.words[start : start + step]
        hits = np.bitwise_count(mw[:, None, :] & vt.words[None, :, :]).sum(axis=2, dtype=np.int64)
        out[start : start + step] = 2 * hits - counts[start : start + step, None]
    return out


_TAP_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


def dilated_gather(x, dilation: int) -> np.ndarray:
    """Collect the nine 3x3 atrous taps of every position.

    ``x`` is ``[..., H, W, C]``; the result is ``[..., H, W, C, 9]`` with tap
    order (dy, dx) row-major over ``{-d, 0, +d}^2``. Out-of-bounds taps are 0.
    """
    x = np.asarray(x)
    if x.ndim < 3:
        raise ShapeError(f"dilated_gather expects [..., H, W, C], got {x.shape}")
    if dilation < 1:
        raise DomainError(f"dilation must be >= 1, got {dilation}")
    d = dilation
    h, w = x.shape[-3], x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 3) + [(d, d), (d, d), (0, 0)]
    xp = np.pad(x, pad)
    taps = [xp[..., d + dy * d : d + dy * d + h, d + dx * d : d + dx * d + w, :] for dy, dx in _TAP_OFFSETS]
    return np.stack(taps, axis=-1)


def tap_validity(h: int, w: int, dilation: int) -> np.ndarray:
    """Boolean ``[H, W, 9]``: which atrous taps fall inside the image."""
    ys = np.arange(h)[:, None, None]
    xs = np.arange(w)[None, :, None]
    dy = np.array([o[0] for o in _TAP_OFFSETS])[None, None, :] * dilation
    dx = np.array([o[1] for o in _TAP_OFFSETS])[None, None, :] * dilation
    return (ys + dy >= 0) & (ys + dy < h) & (xs + dx >= 0) & (xs + dx < w)


def binary_dilated_conv(xb, weight_signs, dilation: int, groups: int) -> np.ndarray:
    """Integer 3x3 grouped atrous convolution of +-1 activations with +-1 weights.

    ``xb``: ``[B, H, W, C]`` of +-1. ``weight_signs``: ``[groups, 9 * C/g, Cout/g]``
    of +-1, rows ordered (tap, channel-in-group). Each output is a masked
    xnor/popcount over the in-bounds taps; out-of-bounds taps contribute 0.
    """
    xb = np.asarray(xb)
    if xb.ndim != 4:
        raise ShapeError(f"expected [B, H, W, C], got {xb.shape}")
    b, h, w, c = xb.shape
    if c % groups:
        raise ShapeError(f"channels {c} not divisible by groups {groups}")
    cg = c // groups
    g_w, k_in, cgo = weight_signs.shape
    if g_w != groups or k_in != 9 * cg:
        raise ShapeError(f"weight shape {weight_signs.shape} does not fit C={c}, groups={groups}")
    taps = dilated_gather(xb, dilation)  # [B, H, W, C, 9]
    valid = np.broadcast_to(tap_validity(h, w, dilation)[None, :, :, None, :], taps.shape)
    out = np.empty((b, h, w, groups * cgo), dtype=np.int64)
    for g in range(groups):
        tg = taps[..., g * cg : (g + 1) * cg, :]
        vg = valid[..., g * cg : (g + 1) * cg, :]
        # rows ordered (tap, channel) to match the weight layout
        rows = np.swapaxes(tg, -1, -2).reshape(-1, 9 * cg)
        vrows = np.swapaxes(vg, -1, -2).reshape(-1, 9 * cg)
        signs = BitMatrix(rows.shape[0], rows.shape[1], _pack_bits(rows == 1))
        mask = MaskMatrix(rows.shape[0], rows.shape[1], _pack_bits(vrows))
        wt = pack(np.ascontiguousarray(weight_signs[g].T))
        res = masked_xnor_gemm_nt(signs, mask, wt)
        out[..., g * cgo : (g + 1) * cgo] = res.reshape(b, h, w, cgo)
    return out
