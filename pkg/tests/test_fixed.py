import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from revlearn.fixed import (FixedRangeError, FixedScalar, FixedVec, dequantize, dequantize_vec,
                            exact_add, exact_sub, quantize, quantize_vec)


def test_quantize_examples():
    assert quantize(0.0, 32).raw == 0
    assert quantize(1.0, 32).raw == 4294967296
    assert quantize(0.3, 8).raw == 77


def test_dequantize_examples():
    assert dequantize(FixedScalar(0, 32)) == 0.0
    assert dequantize(FixedScalar(4294967296, 32)) == 1.0
    assert dequantize(FixedScalar(77, 8)) == 0.30078125


def test_round_half_even():
    assert quantize(2.5 / 256, 8).raw == 2
    assert quantize(3.5 / 256, 8).raw == 4
    assert quantize(-2.5 / 256, 8).raw == -2


def test_out_of_range_names_value():
    with pytest.raises(FixedRangeError, match="1000000000000"):
        quantize(1e12, 32)
    with pytest.raises(FixedRangeError, match="element 1"):
        quantize_vec([0.0, np.inf, 1.0])
    with pytest.raises(FixedRangeError):
        quantize_vec([np.nan])


def test_wraparound_add():
    a = FixedVec(np.array([2**63 - 1], dtype=np.int64), 32)
    b = FixedVec(np.array([1], dtype=np.int64), 32)
    s = exact_add(a, b)
    assert s.raw[0] == -2**63
    assert exact_sub(s, b) == a


def test_additive_identity():
    a = FixedVec(np.array([5], dtype=np.int64), 32)
    assert exact_add(a, FixedVec.zeros(1)) == a


def test_mismatch_rejected():
    with pytest.raises(ValueError, match="length"):
        exact_add(FixedVec.zeros(2), FixedVec.zeros(3))
    with pytest.raises(ValueError, match="frac_bits"):
        exact_add(FixedVec.zeros(2, 16), FixedVec.zeros(2, 32))


raws = hnp.arrays(np.int64, st.integers(1, 20), elements=st.integers(-2**63, 2**63 - 1))


@given(raws, st.data())
def test_add_sub_inverse(a, data):
    b = data.draw(hnp.arrays(np.int64, a.shape, elements=st.integers(-2**63, 2**63 - 1)))
    fa, fb = FixedVec(a, 32), FixedVec(b, 32)
    assert exact_sub(exact_add(fa, fb), fb) == fa


@given(st.floats(-2.0**30, 2.0**30, allow_nan=False), st.sampled_from([8, 16, 32]))
def test_quantization_error_bound(x, fb):
    err = abs(dequantize(quantize(x, fb)) - x)
    assert err <= 2.0 ** (-fb - 1) + abs(x) * 2.0**-52


def test_vector_round_trip():
    x = np.linspace(-3, 3, 101)
    back = dequantize_vec(quantize_vec(x))
    assert np.max(np.abs(back - x)) <= 2.0**-33
    assert quantize_vec(x)[3] == quantize(x[3])
