import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from revlearn.revbuf import (BufferIntegrityError, Ratio, bits_stored, buffers_empty,
                             empty_buffers, pack_values, rat_mul, rat_mul_inverse,
                             rat_mul_inverse_vec, rat_mul_vec, total_bits, unpack_values)

RATIOS = [Ratio(1, 2), Ratio(2, 3), Ratio(7, 8), Ratio(9, 10), Ratio(49, 50)]


def test_ratio_validation():
    with pytest.raises(ValueError):
        Ratio(0, 3)
    with pytest.raises(ValueError):
        Ratio(4, 3)
    with pytest.raises(ValueError):
        Ratio(2, 4)
    with pytest.raises(ValueError):
        Ratio(1, 2**16 + 1)
    assert Ratio.parse("18/20") == Ratio(9, 10)
    assert str(Ratio.from_float(0.9)) == "9/10"
    assert Ratio.from_float(0.5) == Ratio(1, 2)


def test_hand_traces():
    assert rat_mul(0, 10, Ratio(1, 2)) == (0, 5)
    assert rat_mul(0, 7, Ratio(2, 3)) == (0, 5)
    assert rat_mul_inverse(0, 5, Ratio(2, 3)) == (0, 7)
    assert rat_mul_inverse(0, 5, Ratio(1, 2)) == (0, 10)
    assert rat_mul(13, -41, Ratio(1, 1)) == (13, -41)
    assert rat_mul_inverse(13, -41, Ratio(1, 1)) == (13, -41)
    assert rat_mul(0, -1, Ratio(1, 1)) == (0, -1)


def test_negative_floored():
    i, c = rat_mul(0, -7, Ratio(1, 2))
    assert (i, c) == (1, -4)   # floor(-7/2) = -4, remainder 1 stored
    assert rat_mul_inverse(i, c, Ratio(1, 2)) == (0, -7)


@pytest.mark.parametrize("r", RATIOS, ids=str)
def test_exhaustive_round_trip(r):
    c = np.arange(-2**12, 2**12, dtype=np.int64)
    for start in (0, 1, 987654321):
        bufs = empty_buffers(c.size) + start
        b2, c2 = rat_mul_vec(bufs, c, r.n, r.d)
        b3, c3 = rat_mul_inverse_vec(b2, c2, r.n, r.d)
        assert np.array_equal(c3, c)
        assert all(b3 == bufs)
    # scalar and vector forms agree
    b_vec, c_vec = rat_mul_vec(empty_buffers(c.size), c, r.n, r.d)
    for k in (0, 100, 8191):
        assert rat_mul(0, int(c[k]), r) == (b_vec[k], c_vec[k])


@pytest.mark.parametrize("r", RATIOS, ids=str)
def test_error_below_n_units(r):
    c = np.arange(-2**12, 2**12, dtype=np.int64)
    _, c2 = rat_mul_vec(empty_buffers(c.size) + 5, c, r.n, r.d)
    assert np.max(np.abs(c2 - c * r.n / r.d)) < r.n


@given(st.integers(0, 2**200), st.integers(-2**62, 2**62), st.sampled_from(RATIOS))
def test_round_trip_property(i, c, r):
    assert rat_mul_inverse(*rat_mul(i, c, r), r) == (i, c)


def test_vector_accepts_per_element_ratios():
    c = np.array([10, -7, 7, 100], dtype=np.int64)
    n = np.array([1, 1, 2, 49], dtype=np.int64)
    d = np.array([2, 2, 3, 50], dtype=np.int64)
    b, c2 = rat_mul_vec(empty_buffers(4), c, n, d)
    assert c2.tolist() == [5, -4, 5, rat_mul(0, 100, Ratio(49, 50))[1]]
    b3, c3 = rat_mul_inverse_vec(b, c2, n, d)
    assert np.array_equal(c3, c) and buffers_empty(b3)


def test_integrity_errors():
    with pytest.raises(BufferIntegrityError):
        rat_mul_inverse(-1, 3, Ratio(1, 2))
    # inverting a value rat_mul could never produce at the top of the int64 range
    with pytest.raises(BufferIntegrityError):
        rat_mul_inverse(0, 2**63 - 1, Ratio(1, 2))
    with pytest.raises(BufferIntegrityError):
        rat_mul_inverse_vec(empty_buffers(1), np.array([2**63 - 1]), 1, 2)


def test_bits_stored():
    assert bits_stored(0) == 0.0
    assert bits_stored(1) == 1.0
    assert bits_stored(255) == 8.0
    assert total_bits([0, 1, 3]) == 3.0
    with pytest.raises(BufferIntegrityError):
        bits_stored(-1)


def test_entropy_rate_property():
    assert Ratio(7, 8).entropy_bits == pytest.approx(0.1926, abs=1e-4)
    assert Ratio(49, 50).entropy_bits == pytest.approx(0.029, abs=1e-3)
    assert Ratio(1, 1).entropy_bits == 0.0


def test_pack_round_trip():
    raw = np.array([0, -5, 2**62, -2**63], dtype=np.int64)
    bufs = np.array([0, 1, 2**300 + 17, 255], dtype=object)
    blob = pack_values(raw, bufs)
    r2, b2, end = unpack_values(blob)
    assert end == len(blob)
    assert np.array_equal(r2, raw) and list(b2) == list(bufs)
    assert blob[:4] == (4).to_bytes(4, "little")


def test_pack_rejects_bad_input():
    with pytest.raises(ValueError):
        pack_values(np.zeros(2, dtype=np.int64), empty_buffers(3))
    blob = pack_values(np.array([1], dtype=np.int64), np.array([2**40], dtype=object))
    with pytest.raises(ValueError, match="truncated"):
        unpack_values(blob[:-1])
    with pytest.raises(ValueError, match="truncated"):
        unpack_values(blob[:10])
