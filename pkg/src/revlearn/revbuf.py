"""Exactly reversible multiplication by a rational, with an information buffer.

Multiplying an integer by ``n/d < 1`` throws away low-order information. The
routines here keep that information in an arbitrary-precision integer (one per
element), packed in base ``d`` on the way in and drawn back out in base ``n``,
so each multiplication costs ``log2(d/n)`` bits of buffer on average.

Signed values use floored division: the remainder is always in ``[0, d)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

MAX_DENOMINATOR = 2**16

_INT64_MIN = -(2**63)
_INT64_MAX = 2**63 - 1


class BufferIntegrityError(RuntimeError):
    """Raised when a buffer/value pair could not have come from ``rat_mul``."""


@dataclass(frozen=True)
class Ratio:
    n: int
    d: int

    def __post_init__(self):
        n, d = int(self.n), int(self.d)
        if not 0 < n <= d <= MAX_DENOMINATOR:
            raise ValueError(f"ratio {n}/{d} must satisfy 0 < n <= d <= {MAX_DENOMINATOR}")
        if math.gcd(n, d) != 1:
            raise ValueError(f"ratio {n}/{d} is not in lowest terms")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "d", d)

    @classmethod
    def from_float(cls, gamma: float, max_denominator: int = MAX_DENOMINATOR) -> "Ratio":
        """Nearest fraction in (0, 1] with denominator at most ``max_denominator``."""
        if not 0.0 < gamma <= 1.0:
            raise ValueError(f"decay {gamma!r} must lie in (0, 1]")
        fr = Fraction(gamma).limit_denominator(max_denominator)
        if fr == 0:
            fr = Fraction(1, max_denominator)
        return cls(fr.numerator, fr.denominator)

    @classmethod
    def parse(cls, text: str) -> "Ratio":
        num, _, den = text.partition("/")
        fr = Fraction(int(num), int(den or 1))
        return cls(fr.numerator, fr.denominator)

    def __float__(self):
        return self.n / self.d

    def __str__(self):
        return f"{self.n}/{self.d}"

    @property
    def entropy_bits(self) -> float:
        """Bits of buffer consumed per multiplication, on average."""
        return math.log2(self.d / self.n)


def rat_mul(i: int, c: int, r: Ratio) -> tuple[int, int]:
    """Multiply ``c`` by ``r`` in place of ``c * n // d``, keeping the lost digit in ``i``."""
    n, d = r.n, r.d
    i = i * d + c % d
    c = (c // d) * n + i % n
    i //= n
    return i, c


def rat_mul_inverse(i: int, c: int, r: Ratio) -> tuple[int, int]:
    n, d = r.n, r.d
    if i < 0:
        raise BufferIntegrityError(f"negative buffer {i}")
    i = i * n + c % n
    c = (c // n) * d + i % d
    i //= d
    if not _INT64_MIN <= c <= _INT64_MAX:
        raise BufferIntegrityError(f"inverse produced out-of-range value {c}")
    return i, c


def empty_buffers(size: int) -> np.ndarray:
    """Object array of Python ints, all zero."""
    return np.zeros(size, dtype=object)


def _as_obj(x):
    return x.astype(object) if isinstance(x, np.ndarray) else int(x)


def rat_mul_vec(bufs: np.ndarray, c: np.ndarray, n, d) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise ``rat_mul`` over an int64 array.

    ``n`` and ``d`` are either ints or int64 arrays the same length as ``c``.
    """
    n_obj, d_obj = _as_obj(n), _as_obj(d)
    bufs = bufs * d_obj + (c % d).astype(object)
    # (c // d) * n + (< n) never leaves int64 when n <= d
    c = (c // d) * n + (bufs % n_obj).astype(np.int64)
    bufs = bufs // n_obj
    return bufs, c


def rat_mul_inverse_vec(bufs: np.ndarray, c: np.ndarray, n, d) -> tuple[np.ndarray, np.ndarray]:
    n_obj, d_obj = _as_obj(n), _as_obj(d)
    bufs = bufs * n_obj + (c % n).astype(object)
    q = c // n
    d_arr = np.broadcast_to(np.asarray(d, dtype=np.int64), q.shape)
    hi = (_INT64_MAX - (d_arr - 1)) // d_arr
    lo = _INT64_MIN // d_arr
    bad = (q > hi) | (q < lo)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise BufferIntegrityError(
            f"element {k}: value {int(c[k])} cannot be the image of a ratio multiply")
    c = q * d + (bufs % d_obj).astype(np.int64)
    bufs = bufs // d_obj
    return bufs, c


def bits_stored(i: int) -> float:
    """Information content of one buffer, ``log2(i + 1)``."""
    if i < 0:
        raise BufferIntegrityError(f"negative buffer {i}")
    return math.log2(i + 1)


def total_bits(bufs) -> float:
    return float(sum(bits_stored(int(b)) for b in bufs))


def buffers_empty(bufs) -> bool:
    return all(int(b) == 0 for b in bufs)


# Serialization: little-endian, length-prefixed.
#   u32 count, then per element: i64 raw, u32 nbytes, nbytes of buffer digits.

def pack_values(raw: np.ndarray, bufs) -> bytes:
    raw = np.asarray(raw, dtype=np.int64)
    if raw.shape[0] != len(bufs):
        raise ValueError("raw values and buffers differ in length")
    parts = [struct.pack("<I", raw.shape[0])]
    for value, b in zip(raw.tolist(), bufs):
        b = int(b)
        if b < 0:
            raise BufferIntegrityError(f"negative buffer {b}")
        digits = b.to_bytes((b.bit_length() + 7) // 8, "little")
        parts.append(struct.pack("<qI", value, len(digits)))
        parts.append(digits)
    return b"".join(parts)


def unpack_values(blob: bytes, offset: int = 0) -> tuple[np.ndarray, np.ndarray, int]:
    """Inverse of ``pack_values``; returns (raw, buffers, next offset)."""
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    raw = np.empty(count, dtype=np.int64)
    bufs = empty_buffers(count)
    for k in range(count):
        if offset + 12 > len(blob):
            raise ValueError("truncated buffer record")
        raw[k], nbytes = struct.unpack_from("<qI", blob, offset)
        offset += 12
        if offset + nbytes > len(blob):
            raise ValueError("truncated buffer digits")
        bufs[k] = int.from_bytes(blob[offset:offset + nbytes], "little")
        offset += nbytes
    return raw, bufs, offset
