"""Signed 64-bit fixed-point numbers with exactly invertible addition.

Values are stored as raw int64 words with an implied radix point ``frac_bits``
from the right. Addition and subtraction wrap modulo 2**64, so ``sub(add(a, b), b)``
always restores ``a`` bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_FRAC_BITS = 32


class FixedRangeError(OverflowError):
    """A real value does not fit in the fixed-point range."""


@dataclass(frozen=True)
class FixedScalar:
    raw: int
    frac_bits: int = DEFAULT_FRAC_BITS

    def __post_init__(self):
        if not -(2**63) <= self.raw < 2**63:
            raise FixedRangeError(f"raw word {self.raw} does not fit in int64")

    def __float__(self):
        return dequantize(self)


@dataclass(frozen=True, eq=False)
class FixedVec:
    """Vector of fixed-point numbers sharing one radix point.

    ``raw`` is an int64 array; treat it as read-only.
    """

    raw: np.ndarray
    frac_bits: int = DEFAULT_FRAC_BITS

    def __post_init__(self):
        raw = np.asarray(self.raw)
        if raw.dtype != np.int64 or raw.ndim != 1:
            raise TypeError(f"FixedVec needs a 1-d int64 array, got {raw.dtype} shape {raw.shape}")
        object.__setattr__(self, "raw", raw)

    def __len__(self):
        return self.raw.shape[0]

    def __eq__(self, other):
        if not isinstance(other, FixedVec):
            return NotImplemented
        return self.frac_bits == other.frac_bits and np.array_equal(self.raw, other.raw)

    def __getitem__(self, k) -> FixedScalar:
        return FixedScalar(int(self.raw[k]), self.frac_bits)

    def to_float(self) -> np.ndarray:
        return dequantize_vec(self)

    @classmethod
    def zeros(cls, n: int, frac_bits: int = DEFAULT_FRAC_BITS) -> "FixedVec":
        return cls(np.zeros(n, dtype=np.int64), frac_bits)


def max_magnitude(frac_bits: int) -> float:
    return float(2 ** (63 - frac_bits))


def quantize(x: float, frac_bits: int = DEFAULT_FRAC_BITS) -> FixedScalar:
    """Round ``x * 2**frac_bits`` to the nearest integer, ties to even."""
    x = float(x)
    if not abs(x) < max_magnitude(frac_bits):
        raise FixedRangeError(f"value {x!r} outside fixed-point range +/-2^{63 - frac_bits}")
    return FixedScalar(int(np.rint(x * 2.0**frac_bits)), frac_bits)


def dequantize(f: FixedScalar) -> float:
    return f.raw / 2.0**f.frac_bits


def quantize_vec(x, frac_bits: int = DEFAULT_FRAC_BITS) -> FixedVec:
    x = np.asarray(x, dtype=np.float64).ravel()
    bad = ~(np.abs(x) < max_magnitude(frac_bits))
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise FixedRangeError(
            f"element {k} = {x[k]!r} outside fixed-point range +/-2^{63 - frac_bits}")
    # scaling by a power of two is exact, so rint sees the true product
    return FixedVec(np.rint(x * 2.0**frac_bits).astype(np.int64), frac_bits)


def dequantize_vec(f: FixedVec) -> np.ndarray:
    return f.raw.astype(np.float64) / 2.0**f.frac_bits


def _check_pair(a: FixedVec, b: FixedVec):
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if a.frac_bits != b.frac_bits:
        raise ValueError(f"frac_bits mismatch: {a.frac_bits} vs {b.frac_bits}")


def exact_add(a: FixedVec, b: FixedVec) -> FixedVec:
    _check_pair(a, b)
    # int64 array arithmetic in numpy is two's-complement wrap-around
    return FixedVec(a.raw + b.raw, a.frac_bits)


def exact_sub(a: FixedVec, b: FixedVec) -> FixedVec:
    _check_pair(a, b)
    return FixedVec(a.raw - b.raw, a.frac_bits)
