import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from flexsim.errors import EmptyTensor, ExponentOutOfRange, FormatError
from flexsim.format import (
    ExponentState,
    FlexFormat,
    Rounding,
    RoundingMode,
    ceil_log2,
    ceil_log2_int,
    dequantize_tensor,
    quantize_tensor,
    quantize_value,
    representable_range,
    scale_from_exponent,
)
from oracles import quantize_exact

F16 = FlexFormat(16, 5)


@pytest.mark.parametrize("text,n,m", [("flex16+5", 16, 5), ("FLEX8+8", 8, 8), (" Flex2+1 ", 2, 1)])
def test_parse_format(text, n, m):
    fmt = FlexFormat.parse(text)
    assert (fmt.mantissa_bits, fmt.exponent_bits) == (n, m)


@pytest.mark.parametrize("text", ["flex16+9x", "flex16", "float16", "flex1+5", "flex33+5", "flex16+0", "flex16+9"])
def test_parse_format_rejects(text):
    with pytest.raises(FormatError):
        FlexFormat.parse(text)


def test_format_limits():
    assert F16.mantissa_min == -32768
    assert F16.mantissa_max == 32767
    assert F16.overflow_threshold == 32767
    assert str(F16) == "flex16+5"
    assert F16.mantissa_dtype == np.int16
    assert FlexFormat(8, 8).mantissa_dtype == np.int8
    assert FlexFormat(17, 5).mantissa_dtype == np.int32


def test_exponent_window_has_2_to_the_m_values():
    for m in range(1, 9):
        fmt = FlexFormat(16, m)
        assert fmt.exponent_max - fmt.exponent_min + 1 == 2**m
    assert (F16.exponent_min, F16.exponent_max) == (-8, 23)


@pytest.mark.parametrize("e,kappa", [(0, 1.0), (12, 0.000244140625), (-6, 64.0)])
def test_scale_from_exponent(e, kappa):
    st_ = scale_from_exponent(e, F16)
    assert st_.scale == kappa
    assert st_.exponent == e


@pytest.mark.parametrize("e", [24, -9, 100])
def test_scale_from_exponent_out_of_window(e):
    with pytest.raises(ExponentOutOfRange):
        scale_from_exponent(e, F16)


def test_exponent_state_invariant():
    assert ExponentState(3, 0.125).scale == 0.125
    with pytest.raises(ValueError):
        ExponentState(3, 0.25)
    assert ExponentState.from_scale(64.0).exponent == -6
    with pytest.raises(ValueError):
        ExponentState.from_scale(3.0)


def test_quantize_value_examples(loop_path):
    k12 = ExponentState(12)
    assert quantize_value(0.0, k12) == (0, False)
    assert quantize_value(0.0, ExponentState(-8)) == (0, False)
    assert quantize_value(1.0, k12) == (4096, False)
    assert quantize_value(3.14159, k12) == quantize_exact(3.14159, 12, 16) == (12868, False)
    assert quantize_value(5.0, ExponentState(13)) == (32767, True)
    assert quantize_value(-5.0, ExponentState(13)) == (-32767, True)


def test_quantize_tensor_examples(loop_path):
    m, g, over = quantize_tensor([1.0, -2.5, 3.75], ExponentState(12))
    assert m.tolist() == [4096, -10240, 15360]
    assert (g, over) == (15360, False)
    m, g, over = quantize_tensor([0.0, 0.0, 0.0], ExponentState(12))
    assert (m.tolist(), g, over) == ([0, 0, 0], 0, False)
    m, g, over = quantize_tensor([4.0], ExponentState(13))
    assert (m.tolist(), g, over) == ([32767], 32767, True)


def test_quantize_empty():
    with pytest.raises(EmptyTensor):
        quantize_tensor([], ExponentState(0))


def test_quantize_nan_rejected(loop_path):
    with pytest.raises(ValueError):
        quantize_tensor([np.nan], ExponentState(0))


def test_threshold_itself_is_overflow(loop_path):
    # 32767 is representable but counts as an overflow
    assert quantize_value(32767.0, ExponentState(0)) == (32767, True)
    assert quantize_value(32766.0, ExponentState(0)) == (32766, False)
    assert quantize_value(-32767.0, ExponentState(0)) == (-32767, True)


def test_saturation_infinite_input(loop_path):
    m, g, over = quantize_tensor([np.inf, -np.inf, 1.0], ExponentState(0))
    assert m.tolist() == [32767, -32767, 1]
    assert over and g == 32767


def test_ties_to_even(loop_path):
    m, _, _ = quantize_tensor([0.5, 1.5, 2.5, -0.5, -1.5, -2.5], ExponentState(0))
    assert m.tolist() == [0, 2, 2, 0, -2, -2]


def test_truncate_rounds_toward_zero(loop_path):
    m, _, _ = quantize_tensor([1.9, -1.9, 2.5], ExponentState(0), rm=RoundingMode.TRUNCATE)
    assert m.tolist() == [1, -1, 2]


def test_stochastic_rounding_is_seeded_and_unbiased(loop_path):
    xs = np.full(20000, 0.25)
    rm = Rounding(RoundingMode.STOCHASTIC, seed=3)
    a, _, _ = quantize_tensor(xs, ExponentState(0), rm=rm)
    b, _, _ = quantize_tensor(xs, ExponentState(0), rm=rm)
    assert np.array_equal(a, b)
    assert set(np.unique(a)) <= {0, 1}
    assert abs(a.mean() - 0.25) < 0.02


def test_dequantize_examples():
    assert dequantize_tensor([4096], ExponentState(12)).tolist() == [1.0]
    assert dequantize_tensor([0], ExponentState(12)).tolist() == [0.0]
    assert dequantize_tensor([-10240], ExponentState(12)).tolist() == [-2.5]


def test_representable_range():
    assert representable_range(ExponentState(12), F16) == (-8.0, 7.999755859375, 2**-12)
    assert representable_range(ExponentState(0), F16) == (-32768, 32767, 1)
    assert representable_range(ExponentState(0), FlexFormat(2, 1)) == (-2, 1, 1)


@pytest.mark.parametrize("x,expected", [(2.0, 1), (2.0244140625, 2), (1.0, 0), (0.75, 0), (0.5, -1),
                                        (16.0239, 5), (2**-30, -30), (3 * 2**-30, -28)])
def test_ceil_log2(x, expected):
    assert ceil_log2(x) == expected


def test_ceil_log2_int():
    assert [ceil_log2_int(n) for n in (1, 2, 3, 4, 5, 7812, 16384)] == [0, 1, 2, 2, 3, 13, 14]


# -- properties ---------------------------------------------------------------

exponents = st.integers(min_value=-8, max_value=23)
unit = st.floats(min_value=-1.0, max_value=1.0, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(e=exponents, frac=unit)
def test_round_trip_bound(e, frac):
    state = ExponentState(e)
    x = frac * F16.mantissa_max * state.scale
    m, _ = quantize_value(x, state)
    assert abs(m * state.scale - x) <= state.scale / 2
    mt, _ = quantize_value(x, state, rm=RoundingMode.TRUNCATE)
    assert abs(mt * state.scale - x) <= state.scale


@settings(max_examples=300, deadline=None)
@given(e=exponents, a=st.floats(-1e9, 1e9), b=st.floats(-1e9, 1e9))
def test_monotonic(e, a, b):
    lo, hi = min(a, b), max(a, b)
    state = ExponentState(e)
    assert quantize_value(lo, state)[0] <= quantize_value(hi, state)[0]


@settings(max_examples=300, deadline=None)
@given(e=st.integers(-7, 23), frac=unit)
def test_scaling_identity(e, frac):
    state = ExponentState(e)
    x = frac * F16.mantissa_max * state.scale
    assert quantize_value(x, state) == quantize_value(2 * x, ExponentState(e - 1))


@settings(max_examples=300, deadline=None)
@given(e=exponents, x=st.floats(-1e7, 1e7))
def test_matches_exact_rational_oracle(e, x):
    assert quantize_value(x, ExponentState(e)) == quantize_exact(x, e, 16)


@settings(max_examples=200, deadline=None)
@given(xs=st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20), e=exponents)
def test_overflow_flag_matches_gamma_trigger(xs, e):
    _, g, over = quantize_tensor(xs, ExponentState(e))
    assert over == (g >= F16.overflow_threshold)
