"""
WindowQuant -- Group-wise asymmetric RTN quantization.

Each group (one window of one head, K or V, flattened row-major) is
quantized to an unsigned INT4 or INT2 code space with its own scale ``s``
and zero point ``z``:

    s    = max(x_max − x_min, 1e-8) / (q_max − q_min)
    z    = q_min − round(x_min / s)
    code = clamp(round(v / s) + z, q_min, q_max)
    v̂    = s · (code − z)

Rounding is half-away-from-zero.

Packed layout (stable format): with ``k = 8 / bits`` codes per byte, code
``i`` occupies bits ``[(i mod k)·bits, (i mod k + 1)·bits)`` of byte
``i // k``; unused high bits of the final byte are zero. Golden examples:
INT2 ``[1, 2, 3, 0]`` packs to ``0x39``; INT4 ``[0xA, 0x3]`` packs to ``0x3A``.
"""
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from windowquant.errors import QuantizationError

# Floor for a group's value range so the scale stays positive.
RANGE_FLOOR = 1e-8

# Compact deployment encoding of (scale, zero point) used for byte reports.
METADATA_BYTES_PER_GROUP = 4

FP16_BYTES_PER_ELEMENT = 2


class BitWidth(Enum):
    FP16 = 16
    INT4 = 4
    INT2 = 2

    @property
    def bits(self) -> int:
        return self.value

    @property
    def label(self) -> str:
        return self.name.lower()

    @property
    def is_quantized(self) -> bool:
        return self is not BitWidth.FP16

    @classmethod
    def from_label(cls, label: str) -> "BitWidth":
        try:
            return cls[str(label).upper()]
        except KeyError:
            raise ValueError(f"unknown bit-width {label!r}; expected fp16, int4 or int2") from None

    @classmethod
    def from_bits(cls, bits: int) -> "BitWidth":
        try:
            return cls(int(bits))
        except ValueError:
            raise ValueError(f"unsupported bit count {bits}; expected 16, 4 or 2") from None


# Segment order in memory and in decode blocks.
SEGMENT_ORDER = (BitWidth.INT2, BitWidth.INT4, BitWidth.FP16)


def _check_bits(bits: int) -> int:
    if bits not in (2, 4):
        raise QuantizationError(f"quantized groups use 2 or 4 bits, got {bits}")
    return bits


def round_half_away(x):
    """Round to nearest, ties away from zero (platform independent)."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int

    def __post_init__(self):
        _check_bits(self.bits)
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise QuantizationError(f"scale must be positive and finite, got {self.scale}")

    @property
    def q_min(self) -> int:
        return 0

    @property
    def q_max(self) -> int:
        return (1 << self.bits) - 1


@dataclass(frozen=True)
class PackedGroup:
    params: QuantParams
    count: int
    data: bytes

    def __post_init__(self):
        expected = packed_length(self.count, self.params.bits)
        if len(self.data) != expected:
            raise QuantizationError(
                f"packed buffer holds {len(self.data)} bytes, expected {expected} "
                f"for {self.count} x {self.params.bits}-bit codes"
            )

    @property
    def bits(self) -> int:
        return self.params.bits

    @property
    def nbytes(self) -> int:
        return len(self.data)

    def codes(self) -> np.ndarray:
        return unpack_codes(self.data, self.count, self.params.bits)


def packed_length(count: int, bits: int) -> int:
    return -(-count * bits // 8)


def _as_values(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise QuantizationError("cannot quantize an empty group")
    if not np.all(np.isfinite(arr)):
        raise QuantizationError("cannot quantize non-finite values")
    return arr


def compute_params(values, bits: int) -> QuantParams:
    """Scale and zero point for asymmetric RTN over ``values``."""
    _check_bits(bits)
    arr = _as_values(values)
    q_min, q_max = 0, (1 << bits) - 1
    x_min, x_max = float(arr.min()), float(arr.max())
    scale = max(x_max - x_min, RANGE_FLOOR) / (q_max - q_min)
    zero_point = q_min - int(round_half_away(x_min / scale))
    return QuantParams(scale=scale, zero_point=zero_point, bits=bits)


def quantize_codes(values, params: QuantParams) -> np.ndarray:
    """Codes for ``values`` under fixed ``params`` (uint8, clamped)."""
    arr = _as_values(values)
    raw = round_half_away(arr / params.scale) + params.zero_point
    return np.clip(raw, params.q_min, params.q_max).astype(np.uint8)


def quantize_group(values, bits: int, params: QuantParams | None = None) -> PackedGroup:
    """Quantize and pack one group.

    ``params`` lets several groups share one scale/zero point (per-tensor
    granularity); by default they are computed from the group itself.
    """
    arr = _as_values(values)
    if params is None:
        params = compute_params(arr, bits)
    elif params.bits != bits:
        raise QuantizationError(f"params are {params.bits}-bit, group requested {bits}-bit")
    codes = quantize_codes(arr, params)
    return PackedGroup(params=params, count=arr.size, data=pack_codes(codes, bits))


def dequantize_codes(codes, params: QuantParams) -> np.ndarray:
    return params.scale * (np.asarray(codes, dtype=np.float64) - params.zero_point)


def dequantize_group(group: PackedGroup) -> np.ndarray:
    """v̂_i = s · (code_i − z), length ``group.count``."""
    return dequantize_codes(group.codes(), group.params)


def pack_codes(codes, bits: int) -> bytes:
    _check_bits(bits)
    arr = np.asarray(codes, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() > (1 << bits) - 1):
        raise QuantizationError(f"code out of range for {bits}-bit packing")
    per_byte = 8 // bits
    padded = np.zeros(-(-arr.size // per_byte) * per_byte, dtype=np.int64)
    padded[: arr.size] = arr
    shifts = np.arange(per_byte, dtype=np.int64) * bits
    packed = (padded.reshape(-1, per_byte) << shifts).sum(axis=1)
    return packed.astype(np.uint8).tobytes()


def unpack_codes(data: bytes, count: int, bits: int) -> np.ndarray:
    _check_bits(bits)
    if len(data) != packed_length(count, bits):
        raise QuantizationError(
            f"buffer of {len(data)} bytes cannot hold exactly {count} x {bits}-bit codes"
        )
    per_byte = 8 // bits
    raw = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    shifts = np.arange(per_byte, dtype=np.int64) * bits
    codes = ((raw[:, None] >> shifts) & ((1 << bits) - 1)).reshape(-1)
    if np.any(codes[count:]):
        raise QuantizationError("non-zero padding bits in final byte")
    return codes[:count].astype(np.uint8)
