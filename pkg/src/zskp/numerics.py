"""Sign-magnitude fixed-point arithmetic used throughout the accelerator model.

Activations and weights are 8-bit sign+magnitude scalars: one sign bit plus
a 7-bit magnitude, with a single canonical zero (never "negative zero").
Partial sums accumulate at full 32-bit signed width; an output value is
rescaled back to 8 bits only once its accumulator is complete, via a
per-layer power-of-two right shift with round-half-away-from-zero and an
optional ReLU.

In bulk data paths (tensors, tiles) a scalar is carried as a plain signed
integer in [-127, 127]; that representation is bijective with the canonical
sign+magnitude encoding, and ``QVal`` converts between the two. The wire
encoding of one scalar is a single byte: bit 7 = sign, bits 6..0 = magnitude.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAG_MAX = 127
MUL_MAX = MAG_MAX * MAG_MAX  # 16129, the widest single product
ACC_LIMIT = 1 << 31  # accumulators are 32-bit signed


class QuantizationError(ValueError):
    """Raised for values or scales outside the quantizable domain."""


@dataclass(frozen=True)
class QVal:
    """One 8-bit sign+magnitude scalar. ``sign=True`` means negative.

    Construction saturates the magnitude to 127 and canonicalizes zero,
    so every QVal in existence satisfies the representation invariants.
    """

    sign: bool
    magnitude: int

    def __post_init__(self):
        if self.magnitude < 0:
            raise ValueError(f"magnitude must be non-negative, got {self.magnitude}")
        if self.magnitude > MAG_MAX:
            object.__setattr__(self, "magnitude", MAG_MAX)
        if self.magnitude == 0 and self.sign:
            object.__setattr__(self, "sign", False)

    @classmethod
    def from_int(cls, v: int) -> "QVal":
        return cls(v < 0, min(abs(int(v)), MAG_MAX))

    def to_int(self) -> int:
        return -self.magnitude if self.sign else self.magnitude

    def to_byte(self) -> int:
        return (0x80 if self.sign else 0x00) | self.magnitude

    @classmethod
    def from_byte(cls, b: int) -> "QVal":
        if not 0 <= b <= 0xFF:
            raise ValueError(f"not a byte: {b}")
        if b == 0x80:
            raise ValueError("non-canonical negative zero byte 0x80")
        return cls(bool(b & 0x80), b & 0x7F)


ZERO = QVal(False, 0)


def encode_byte(v: int) -> int:
    """Signed scalar in [-127, 127] to its sign+magnitude wire byte."""
    v = int(v)
    if not -MAG_MAX <= v <= MAG_MAX:
        raise ValueError(f"value out of 8-bit sign-magnitude range: {v}")
    return (0x80 | -v) if v < 0 else v


def decode_byte(b: int) -> int:
    """Inverse of :func:`encode_byte`; rejects the 0x80 negative-zero byte."""
    return QVal.from_byte(b).to_int()


@dataclass(frozen=True)
class LayerQuant:
    """Per-layer requantization parameters.

    ``weight_scale`` maps real weights onto the integer grid; ``act_shift``
    is the power-of-two right shift applied to completed accumulators.
    """

    weight_scale: float
    act_shift: int
    apply_relu: bool = True

    def __post_init__(self):
        if not self.weight_scale > 0:
            raise ValueError(f"weight_scale must be positive, got {self.weight_scale}")
        if not 0 <= self.act_shift <= 31:
            raise ValueError(f"act_shift must be in [0, 31], got {self.act_shift}")


def quantize(x: float, scale: float) -> QVal:
    """Real value to sign+magnitude at the given scale.

    Magnitude is round-half-away-from-zero of ``|x| * scale``, saturated
    at 127. Zero is always (+, 0).
    """
    if not math.isfinite(x):
        raise QuantizationError(f"cannot quantize non-finite value {x!r}")
    if not (isinstance(scale, (int, float)) and math.isfinite(scale) and scale > 0):
        raise QuantizationError(f"scale must be a positive finite real, got {scale!r}")
    mag = min(MAG_MAX, int(math.floor(abs(x) * scale + 0.5)))
    return QVal(x < 0, mag)


def mul(a: QVal, b: QVal) -> int:
    """XOR-signed product of magnitudes; result in [-16129, 16129]."""
    p = a.magnitude * b.magnitude
    return -p if (a.sign != b.sign) else p


def round_shift(value: int, shift: int) -> int:
    """Divide by 2**shift, rounding half away from zero."""
    value = int(value)
    if shift == 0:
        return value
    half = 1 << (shift - 1)
    if value >= 0:
        return (value + half) >> shift
    return -((-value + half) >> shift)


def requantize(acc: int, q: LayerQuant) -> QVal:
    """Completed 32-bit accumulator back to one 8-bit activation."""
    v = round_shift(acc, q.act_shift)
    if q.apply_relu and v < 0:
        v = 0
    return QVal.from_int(v)


# ---------------------------------------------------------------------------
# Vectorized forms for tensor-sized data. These must agree element-wise with
# the scalar operations above (tested as a property).
# ---------------------------------------------------------------------------

def quantize_array(x: np.ndarray, scale: float) -> np.ndarray:
    """Quantize a real array to signed int16 magnitudes in [-127, 127]."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise QuantizationError("cannot quantize non-finite values")
    if not (math.isfinite(scale) and scale > 0):
        raise QuantizationError(f"scale must be a positive finite real, got {scale!r}")
    mag = np.minimum(MAG_MAX, np.floor(np.abs(x) * scale + 0.5)).astype(np.int64)
    return np.where(x < 0, -mag, mag).astype(np.int16)


def requantize_array(acc: np.ndarray, q: LayerQuant) -> np.ndarray:
    """Vectorized :func:`requantize`: int accumulators to int16 activations."""
    acc = np.asarray(acc, dtype=np.int64)
    if q.act_shift == 0:
        v = acc.copy()
    else:
        half = 1 << (q.act_shift - 1)
        v = np.sign(acc) * ((np.abs(acc) + half) >> q.act_shift)
    if q.apply_relu:
        v = np.maximum(v, 0)
    return np.clip(v, -MAG_MAX, MAG_MAX).astype(np.int16)


def check_acc_bound(kernel: int, in_channels: int, bias_acc_max: int = 0) -> None:
    """Reject layer shapes whose worst-case accumulator could overflow 32 bits."""
    worst = MUL_MAX * kernel * kernel * in_channels + abs(int(bias_acc_max))
    if worst >= ACC_LIMIT:
        raise QuantizationError(
            f"layer exceeds 32-bit accumulation: 127*127*{kernel}^2*{in_channels}"
            f" + |bias| = {worst} >= 2^31"
        )
