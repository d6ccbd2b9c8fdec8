"""Blockwise 4-bit (NF4) and 8-bit quantization primitives.

NF4 stores one 4-bit code per element against a fixed 16-level normal-float
codebook, with one absolute-maximum scale per block of 64 elements. The 8-bit
path is linear absmax quantization over blocks of 256; it backs optimizer
moment storage and "double quantization" of the NF4 scales themselves.

All functions are pure: they never mutate their inputs and hold no state, so
they are safe to call concurrently.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IntegrityError, QuantizationError

NF4_BLOCK = 64
Q8_BLOCK = 256
SCALE_GROUP = 256

SCALE_FP32 = "fp32"
SCALE_DQ = "double-quantized"

# The 16 normal-float levels: standard-normal quantiles taken on an evenly
# spaced probability grid with offset (1/32 + 1/30)/2, one side carrying 8
# nonzero levels and the other 7 so that exact zero is representable, then
# normalized by the largest magnitude. tests/test_quant.py rebuilds this table
# from scipy's quantile function and checks agreement to 1e-6.
NF4_LEVELS = np.array(
    [
        -1.0,
        -0.6961928009986877,
        -0.5250730514526367,
        -0.39491748809814453,
        -0.28444138169288635,
        -0.18477343022823334,
        -0.09105003625154495,
        0.0,
        0.07958029955625534,
        0.16093020141124725,
        0.24611230194568634,
        0.33791524171829224,
        0.4407098293304443,
        0.5626170039176941,
        0.7229568362236023,
        1.0,
    ],
    dtype=np.float64,
)

NF4_ZERO_CODE = 7  # index of the exact 0.0 level

# Decision boundaries between adjacent levels. searchsorted with side="left"
# sends a value sitting exactly on a boundary to the lower code.
_NF4_MIDPOINTS = (NF4_LEVELS[:-1] + NF4_LEVELS[1:]) / 2.0


def nf4_codebook() -> np.ndarray:
    """Return a copy of the 16 NF4 levels (strictly increasing, endpoints ±1)."""
    return NF4_LEVELS.copy()


@dataclass
class Q8Block:
    """One block of linear 8-bit codes: value = code/127 * absmax."""

    codes: np.ndarray  # int8
    absmax: float  # float32-rounded

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int8)
        self.absmax = float(np.float32(self.absmax))


@dataclass
class DoubleQuantizedScales:
    """Per-group mean (fp32) plus 8-bit codes of the residual scales."""

    group_size: int
    means: np.ndarray  # float32, one per group
    blocks: list[Q8Block] = field(default_factory=list)  # one per group


@dataclass
class QuantizedTensor:
    """NF4-coded tensor: 4-bit level indices plus one absmax scale per block.

    ``codes`` holds one index (0..15) per element in row-major order; the
    packed two-per-byte layout is used only on the wire (see
    :func:`serialize_quantized`). ``scales`` always holds the effective
    per-block scale as float32; when ``scale_encoding`` is
    ``"double-quantized"`` those values are the reconstruction of
    ``scale_store`` and the store is what gets serialized.
    """

    shape: tuple[int, ...]
    codes: np.ndarray  # uint8, values 0..15
    block_size: int
    scales: np.ndarray  # float32, ceil(n / block_size) entries
    scale_encoding: str = SCALE_FP32
    scale_store: DoubleQuantizedScales | None = None

    @property
    def num_elements(self) -> int:
        n = 1
        for d in self.shape:
            n *= int(d)
        return n

    @property
    def num_blocks(self) -> int:
        return -(-self.num_elements // self.block_size)


def quantize_nf4(
    values,
    block_size: int = NF4_BLOCK,
    scale_encoding: str = SCALE_FP32,
    scale_group_size: int = SCALE_GROUP,
) -> QuantizedTensor:
    """Quantize a real tensor to blockwise NF4.

    Per block the scale is max |x|; each element maps to the nearest codebook
    level of x/scale, ties toward the lower index. An all-zero block gets
    scale 0 and every code pointing at the 0.0 level. With
    ``scale_encoding="double-quantized"`` the absmax scales are immediately
    passed through the 8-bit group compression so the in-memory tensor equals
    what a serialize/deserialize cycle would produce.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise QuantizationError("cannot quantize an empty tensor")
    if block_size < 1:
        raise ConfigError(f"block_size must be >= 1, got {block_size}")
    if scale_encoding not in (SCALE_FP32, SCALE_DQ):
        raise ConfigError(f"unknown scale_encoding {scale_encoding!r}")
    if not np.isfinite(arr).all():
        raise QuantizationError("input contains non-finite values")

    flat = arr.reshape(-1)
    n = flat.size
    n_blocks = -(-n // block_size)
    padded = np.zeros(n_blocks * block_size, dtype=np.float64)
    padded[:n] = flat
    blocks = padded.reshape(n_blocks, block_size)

    raw_scales = np.abs(blocks).max(axis=1)
    store = None
    if scale_encoding == SCALE_DQ:
        store = double_quantize_scales(raw_scales, scale_group_size)
        eff_scales = dequantize_scales(store, clamp_non_negative=True)[:n_blocks]
    else:
        eff_scales = raw_scales.astype(np.float32)

    safe = np.where(eff_scales > 0, eff_scales, 1.0).astype(np.float64)
    normalized = blocks / safe[:, None]
    codes = np.searchsorted(_NF4_MIDPOINTS, normalized.reshape(-1), side="left")
    codes = codes.astype(np.uint8)[:n]
    # Zero-scale blocks carry no information; pin them to the exact-zero level.
    zero_blocks = np.repeat(eff_scales <= 0, block_size)[:n]
    codes[zero_blocks] = NF4_ZERO_CODE

    return QuantizedTensor(
        shape=tuple(int(d) for d in arr.shape),
        codes=codes,
        block_size=int(block_size),
        scales=np.asarray(eff_scales, dtype=np.float32),
        scale_encoding=scale_encoding,
        scale_store=store,
    )


def dequantize_nf4(q: QuantizedTensor) -> np.ndarray:
    """Reconstruct the real tensor: element = codebook[code] * block scale."""
    codes = np.asarray(q.codes)
    if codes.size != q.num_elements:
        raise IntegrityError(
            f"code count {codes.size} does not match shape {q.shape}"
        )
    if codes.size and codes.max() > 15:
        raise IntegrityError(f"corrupted code {int(codes.max())} > 15")
    per_element_scale = np.repeat(
        q.scales.astype(np.float64), q.block_size
    )[: q.num_elements]
    out = NF4_LEVELS[codes] * per_element_scale
    return out.reshape(q.shape)


def quantize_q8(values, block_size: int = Q8_BLOCK) -> list[Q8Block]:
    """Linear signed 8-bit quantization: code = round(127 * x / absmax).

    Rounding is half-away-from-zero, clamped to [-127, 127]; a block with
    absmax 0 stores all-zero codes.
    """
    if block_size < 1:
        raise ConfigError(f"block_size must be >= 1, got {block_size}")
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if not np.isfinite(arr).all():
        raise QuantizationError("input contains non-finite values")

    blocks = []
    for start in range(0, max(arr.size, 1), block_size):
        chunk = arr[start : start + block_size]
        if chunk.size == 0:
            break
        absmax = float(np.float32(np.abs(chunk).max()))
        if absmax > 0:
            y = 127.0 * chunk / absmax
            codes = np.sign(y) * np.floor(np.abs(y) + 0.5)
            codes = np.clip(codes, -127, 127)
        else:
            codes = np.zeros_like(chunk)
        blocks.append(Q8Block(codes=codes.astype(np.int8), absmax=absmax))
    return blocks


def dequantize_q8(blocks: list[Q8Block], shape) -> np.ndarray:
    """Reconstruct values: code/127 * absmax, reshaped to ``shape``."""
    shape = tuple(int(d) for d in shape)
    n = 1
    for d in shape:
        n *= d
    parts = [b.codes.astype(np.float64) / 127.0 * b.absmax for b in blocks]
    flat = np.concatenate(parts) if parts else np.zeros(0)
    if flat.size != n:
        raise IntegrityError(
            f"block element count {flat.size} does not match shape {shape}"
        )
    return flat.reshape(shape)


def double_quantize_scales(
    scales, group_size: int = SCALE_GROUP
) -> DoubleQuantizedScales:
    """Compress a scale vector: per group store the fp32 mean and the 8-bit
    codes of (scale - mean)."""
    if group_size < 1:
        raise ConfigError(f"group_size must be >= 1, got {group_size}")
    arr = np.asarray(scales, dtype=np.float64).reshape(-1)
    means = []
    blocks = []
    for start in range(0, arr.size, group_size):
        chunk = arr[start : start + group_size]
        mean = np.float32(chunk.mean())
        means.append(mean)
        blocks.extend(quantize_q8(chunk - np.float64(mean), block_size=group_size))
    return DoubleQuantizedScales(
        group_size=int(group_size),
        means=np.asarray(means, dtype=np.float32),
        blocks=blocks,
    )


def dequantize_scales(
    store: DoubleQuantizedScales, clamp_non_negative: bool = False
) -> np.ndarray:
    """Reverse :func:`double_quantize_scales`; optionally clamp at zero
    (NF4 scales are non-negative by construction)."""
    out = []
    for mean, block in zip(store.means, store.blocks):
        vals = np.float64(mean) + block.codes.astype(np.float64) / 127.0 * block.absmax
        out.append(vals)
    flat = np.concatenate(out) if out else np.zeros(0)
    if clamp_non_negative:
        flat = np.maximum(flat, 0.0)
    return flat.astype(np.float32)


def quant_error_stats(original, q: QuantizedTensor) -> dict:
    """Error statistics of original - dequantize_nf4(q)."""
    arr = np.asarray(original, dtype=np.float64)
    if tuple(arr.shape) != tuple(q.shape):
        raise IntegrityError(
            f"shape mismatch: original {arr.shape} vs quantized {q.shape}"
        )
    err = arr - dequantize_nf4(q)
    return {
        "max_abs_err": float(np.abs(err).max()),
        "mean_abs_err": float(np.abs(err).mean()),
        "mse": float((err**2).mean()),
    }


def nf4_bytes_per_weight(
    block_size: int = NF4_BLOCK,
    scale_encoding: str = SCALE_DQ,
    group_size: int = SCALE_GROUP,
) -> float:
    """Storage cost of one weight: 4-bit code plus amortized scale overhead.

    Plain fp32 scales cost 4 bytes per block; double-quantized scales cost one
    byte per block plus 8 bytes (mean + residual absmax, both fp32) per group
    of ``group_size`` blocks.
    """
    if scale_encoding == SCALE_DQ:
        return 0.5 + 1.0 / block_size + 8.0 / (block_size * group_size)
    return 0.5 + 4.0 / block_size


# --- wire format -----------------------------------------------------------
# Little-endian. Header {ndim u32, dims u64[], block_size u32, scale_encoding
# u8}, then packed 4-bit codes (low nibble = even element index), then the
# scale section: raw f32 scales for fp32 encoding, or {group_size u32, means
# f32[n_groups], per group absmax f32 + codes i8[group]} for double-quantized.

_ENCODING_BYTE = {SCALE_FP32: 0, SCALE_DQ: 1}
_BYTE_ENCODING = {v: k for k, v in _ENCODING_BYTE.items()}


def pack_codes(codes: np.ndarray) -> bytes:
    """Pack 4-bit codes two per byte, low nibble first."""
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.size % 2:
        codes = np.concatenate([codes, np.zeros(1, dtype=np.uint8)])
    pairs = codes.reshape(-1, 2)
    return (pairs[:, 0] | (pairs[:, 1] << 4)).astype(np.uint8).tobytes()


def unpack_codes(buf: bytes, n: int) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=np.uint8)
    out = np.empty(raw.size * 2, dtype=np.uint8)
    out[0::2] = raw & 0x0F
    out[1::2] = raw >> 4
    return out[:n]


def serialize_quantized(q: QuantizedTensor) -> bytes:
    parts = [struct.pack("<I", len(q.shape))]
    parts.append(struct.pack(f"<{len(q.shape)}Q", *q.shape))
    parts.append(struct.pack("<IB", q.block_size, _ENCODING_BYTE[q.scale_encoding]))
    parts.append(pack_codes(q.codes))
    if q.scale_encoding == SCALE_FP32:
        parts.append(np.asarray(q.scales, dtype="<f4").tobytes())
    else:
        store = q.scale_store
        if store is None:
            raise IntegrityError("double-quantized tensor missing its scale store")
        parts.append(struct.pack("<I", store.group_size))
        parts.append(np.asarray(store.means, dtype="<f4").tobytes())
        for block in store.blocks:
            parts.append(struct.pack("<f", block.absmax))
            parts.append(block.codes.astype("<i1").tobytes())
    return b"".join(parts)


def deserialize_quantized(buf: bytes) -> QuantizedTensor:
    try:
        off = 0
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        block_size, enc_byte = struct.unpack_from("<IB", buf, off)
        off += 5
        n = 1
        for d in dims:
            n *= d
        n_code_bytes = (n + 1) // 2
        codes = unpack_codes(buf[off : off + n_code_bytes], n)
        if codes.size != n:
            raise IntegrityError("truncated code section")
        off += n_code_bytes
        encoding = _BYTE_ENCODING[enc_byte]
        n_blocks = -(-n // block_size)
        if encoding == SCALE_FP32:
            scales = np.frombuffer(buf, dtype="<f4", count=n_blocks, offset=off)
            off += 4 * n_blocks
            store = None
            eff = scales.copy()
        else:
            (group_size,) = struct.unpack_from("<I", buf, off)
            off += 4
            n_groups = -(-n_blocks // group_size)
            means = np.frombuffer(buf, dtype="<f4", count=n_groups, offset=off).copy()
            off += 4 * n_groups
            blocks = []
            remaining = n_blocks
            for _ in range(n_groups):
                take = min(group_size, remaining)
                (absmax,) = struct.unpack_from("<f", buf, off)
                off += 4
                codes_i8 = np.frombuffer(buf, dtype="<i1", count=take, offset=off).copy()
                off += take
                blocks.append(Q8Block(codes=codes_i8, absmax=absmax))
                remaining -= take
            store = DoubleQuantizedScales(
                group_size=group_size, means=means, blocks=blocks
            )
            eff = dequantize_scales(store, clamp_non_negative=True)[:n_blocks]
        if off > len(buf):
            raise IntegrityError("buffer shorter than declared sections")
    except (struct.error, KeyError, ValueError) as exc:
        raise IntegrityError(f"malformed quantized-tensor buffer: {exc}") from exc
    return QuantizedTensor(
        shape=tuple(int(d) for d in dims),
        codes=codes,
        block_size=int(block_size),
        scales=np.asarray(eff, dtype=np.float32),
        scale_encoding=encoding,
        scale_store=store,
    )
