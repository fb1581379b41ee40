import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from approxfl.arith import (BFLOAT10, BFLOAT12, BFLOAT16, FP32, MBM_CORRECTION, FloatFormat, MulKind,
                            MultiplierSpec, approx_multiply, calibrate_correction, characterize_error,
                            exact_multiply_accumulate, mac_matmul, mantissa_grid, round_to_format)
from oracles import exact_product, log_product, truncate

finite32 = st.floats(width=32, allow_nan=False, allow_infinity=False)
normal32 = st.floats(min_value=2.0 ** -60, max_value=2.0 ** 60, width=32) | \
    st.floats(min_value=-(2.0 ** 60), max_value=-(2.0 ** -60), width=32)


# ---------------------------------------------------------------------------
# formats

def test_format_widths_and_names():
    # [TRIVIAL] 1 sign + 8 exponent + m mantissa bits
    assert [f.width for f in (FP32, BFLOAT16, BFLOAT12, BFLOAT10)] == [32, 16, 12, 10]
    assert BFLOAT12.name == "bfloat12"
    assert FloatFormat.from_name("bfloat10") == BFLOAT10
    with pytest.raises(ValueError):
        FloatFormat(24)


@given(finite32, st.sampled_from([1, 3, 7, 23]))
def test_round_to_format_matches_struct_oracle(x, m):
    # [DERIVED] against a struct-based truncation oracle
    got = float(round_to_format(np.float32(x), FloatFormat(m)))
    want = truncate(x, m)
    assert math.copysign(1, got) == math.copysign(1, want) and got == want


@given(finite32, st.sampled_from([1, 3, 7]))
def test_round_to_format_idempotent_and_toward_zero(x, m):
    fmt = FloatFormat(m)
    r = round_to_format(np.float32(x), fmt)
    assert round_to_format(r, fmt) == r
    assert abs(float(r)) <= abs(x)


def test_round_to_format_specials():
    fmt = BFLOAT16
    assert np.isnan(round_to_format(np.float32("nan"), fmt))
    assert round_to_format(np.float32("inf"), fmt) == np.inf
    sub = np.float32(1e-40)
    assert round_to_format(sub, fmt) == 0.0
    assert math.copysign(1, float(round_to_format(-sub, fmt))) == -1


# ---------------------------------------------------------------------------
# multipliers

def test_mitchell_hand_examples():
    # [TRIVIAL] 3 = 2(1+0.5): x1+x2 = 1 -> 2^(1+1+1) * 1.0 = 8
    spec = MultiplierSpec.mitchell(7)
    assert approx_multiply(3.0, 3.0, spec) == 8.0
    # 2 x 4 is a power-of-two product, exact under Mitchell
    assert approx_multiply(2.0, 4.0, spec) == 8.0
    # 1.5 x 1.5: x1+x2 = 1 -> 2 * 1 = 2 (true 2.25)
    assert approx_multiply(1.5, 1.5, spec) == 2.0
    assert exact_multiply_accumulate(1.0, 2.0, 4.0, spec) == 9.0


def test_mbm_hand_example():
    # [TRIVIAL] 1.25 x 1.25 with c = 17/256, m=7: 1 + 0.5 + 0.06640625 chopped to 7 bits
    spec = MultiplierSpec.mbm(7)
    assert approx_multiply(1.25, 1.25, spec) == 1.5625  # 1.56640625 -> 1 + 72/128


@pytest.mark.parametrize("m", [1, 3, 7])
@pytest.mark.parametrize("kind", ["exact", "mitchell", "mbm"])
def test_exhaustive_mantissa_pairs_match_oracle(m, kind):
    # [DERIVED] every mantissa pair at two exponent offsets and both signs
    spec = MultiplierSpec.exact(m) if kind == "exact" else \
        (MultiplierSpec.mitchell(m) if kind == "mitchell" else MultiplierSpec.mbm(m))
    g = mantissa_grid(m).astype(np.float64)
    a = np.concatenate([g, -g * 4.0])
    b = np.concatenate([g, g * 0.5])
    A, B = np.meshgrid(a, b, indexing="ij")
    got = approx_multiply(A.astype(np.float32), B.astype(np.float32), spec)
    for x, y, z in zip(A.ravel(), B.ravel(), got.ravel()):
        want = exact_product(x, y, m) if kind == "exact" else log_product(x, y, m, spec.correction)
        assert z == want, (x, y, z, want)


@settings(max_examples=300)
@given(normal32, normal32, st.sampled_from([1, 3, 7]), st.sampled_from(list(MulKind)))
def test_random_products_match_oracle(a, b, m, kind):
    spec = {MulKind.EXACT: MultiplierSpec.exact(m), MulKind.MITCHELL: MultiplierSpec.mitchell(m),
            MulKind.MBM: MultiplierSpec.mbm(m)}[kind]
    a, b = truncate(a, m), truncate(b, m)
    got = float(approx_multiply(np.float32(a), np.float32(b), spec))
    want = exact_product(a, b, m) if kind is MulKind.EXACT else log_product(a, b, m, spec.correction)
    assert got == want


@settings(max_examples=200)
@given(normal32, normal32, st.sampled_from([1, 3, 7, 23]))
def test_mitchell_never_overestimates_and_bounded(a, b, m):
    spec = MultiplierSpec.mitchell(m)
    a, b = truncate(a, m), truncate(b, m)
    p = float(approx_multiply(np.float32(a), np.float32(b), spec))
    true = a * b
    if 2.0 ** -120 < abs(true) < 2.0 ** 120:
        assert abs(p) <= abs(true)
        assert abs(p - true) / abs(true) <= 1 / 9 + 2.0 ** -m  # 11.1% plus output truncation


@given(normal32, normal32, st.sampled_from(list(MulKind)))
def test_multiplier_commutes_and_sign_symmetric(a, b, kind):
    spec = MultiplierSpec(kind, 7, MBM_CORRECTION[7] if kind is MulKind.MBM else 0.0)
    p = approx_multiply(np.float32(a), np.float32(b), spec)
    assert p == approx_multiply(np.float32(b), np.float32(a), spec)
    assert approx_multiply(np.float32(-a), np.float32(b), spec) == -p


def test_zero_nan_overflow_underflow():
    for spec in (MultiplierSpec.exact(7), MultiplierSpec.mitchell(7), MultiplierSpec.mbm(7)):
        assert approx_multiply(0.0, 5.0, spec) == 0.0
        assert np.isnan(approx_multiply(np.nan, 5.0, spec))
        assert np.isnan(approx_multiply(np.inf, 5.0, spec))
        assert approx_multiply(3e38, 3e38, spec) == BFLOAT16.max_value
        assert approx_multiply(-3e38, 3e38, spec) == -BFLOAT16.max_value
        assert approx_multiply(1e-30, 1e-30, spec) == 0.0


def test_multiplier_spec_validation():
    with pytest.raises(ValueError):
        MultiplierSpec(MulKind.MBM, 7, 0.0)
    with pytest.raises(ValueError):
        MultiplierSpec(MulKind.MBM, 7, 0.01)  # not a multiple of 2^-8
    with pytest.raises(ValueError):
        MultiplierSpec(MulKind.MITCHELL, 7, 0.5)
    with pytest.raises(ValueError):
        MultiplierSpec.mbm(23)


# ---------------------------------------------------------------------------
# error characterisation

def test_exact_has_zero_error():
    for m in (1, 3, 7):
        s = characterize_error(MultiplierSpec.exact(m))
        assert s.mean_rel == 0.0 and s.max_rel == 0.0 and s.pairs == 4 ** m


@pytest.mark.parametrize("m", [1, 3, 7])
def test_mitchell_error_bound(m):
    # [PAPER] worst case about 11.1%; 1/9 at x1 = x2 = 1/2
    s = characterize_error(MultiplierSpec.mitchell(m))
    assert s.max_rel <= 0.112
    assert s.max_rel == pytest.approx(1 / 9, abs=1e-12)
    assert s.bias < 0


@pytest.mark.parametrize("m", [3, 7])
def test_mbm_beats_mitchell_on_mean_error(m):
    mbm = characterize_error(MultiplierSpec.mbm(m))
    mit = characterize_error(MultiplierSpec.mitchell(m))
    assert mbm.mean_rel < mit.mean_rel
    assert abs(mbm.bias) < abs(mit.bias)


def test_mbm_one_bit_reduces_bias_only():
    # with a single mantissa bit no positive c lowers the mean |error|; the bias still shrinks
    mbm = characterize_error(MultiplierSpec.mbm(1))
    mit = characterize_error(MultiplierSpec.mitchell(1))
    assert mbm.mean_rel > mit.mean_rel
    assert abs(mbm.bias) < abs(mit.bias)


@pytest.mark.parametrize("m", [1, 3, 7])
def test_frozen_corrections_reproduce(m):
    c, stats = calibrate_correction(m)
    assert c == MBM_CORRECTION[m]
    assert stats == characterize_error(MultiplierSpec.mbm(m))


def test_output_stage_statistics():
    s = characterize_error(MultiplierSpec.mitchell(3), stage="output")
    assert 0 < s.max_rel < 0.2
    with pytest.raises(ValueError):
        characterize_error(MultiplierSpec.mitchell(3), stage="nope")


# ---------------------------------------------------------------------------
# GEMM through the MAC array

def _loop_gemm(a, b, spec):
    fmt = spec.format
    a = np.asarray(round_to_format(a.astype(np.float32), fmt))
    b = np.asarray(round_to_format(b.astype(np.float32), fmt))
    out = np.zeros((a.shape[0], b.shape[1]), np.float32)
    for k in range(a.shape[1]):
        out = out + np.asarray(approx_multiply(a[:, k:k + 1], b[k:k + 1, :], spec), np.float32)
    return out


@pytest.mark.parametrize("spec", [MultiplierSpec.exact(7), MultiplierSpec.mbm(7), MultiplierSpec.mbm(3),
                                  MultiplierSpec.mbm(1), MultiplierSpec.mitchell(3),
                                  MultiplierSpec.mitchell(23), MultiplierSpec.exact(23)])
def test_mac_matmul_matches_sequential_loop(spec, rng):
    # [DERIVED] sequential column-chain accumulation
    a = rng.standard_normal((37, 29)).astype(np.float32)
    b = rng.standard_normal((29, 11)).astype(np.float32)
    got = mac_matmul(a, b, spec)
    want = _loop_gemm(a, b, spec)
    if spec == MultiplierSpec.exact(23):
        # BLAS summation order differs; values agree to float32 rounding
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)
    else:
        np.testing.assert_array_equal(got, want)


def test_mac_matmul_unsafe_exponents_saturate(rng):
    spec = MultiplierSpec.mbm(7)
    a = np.array([[3e38, 1e-30]], np.float32)
    b = np.array([[3e38], [1e-30]], np.float32)
    got = mac_matmul(a, b, spec)
    assert got[0, 0] == np.float32(BFLOAT16.max_value)
    np.testing.assert_array_equal(got, _loop_gemm(a, b, spec))


def test_mac_matmul_shapes():
    with pytest.raises(ValueError):
        mac_matmul(np.zeros((2, 3)), np.zeros((4, 2)), MultiplierSpec.exact())
    out = mac_matmul(np.zeros((2, 0)), np.zeros((0, 3)), MultiplierSpec.mbm(7))
    assert out.shape == (2, 3) and not out.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_mac_matmul_exact_bf16_close_to_float64(m, k, n, seed):
    r = np.random.default_rng(seed)
    a = r.uniform(-2, 2, (m, k)).astype(np.float32)
    b = r.uniform(-2, 2, (k, n)).astype(np.float32)
    spec = MultiplierSpec.exact(7)
    got = mac_matmul(a, b, spec)
    a16 = np.asarray(round_to_format(a, BFLOAT16), np.float64)
    b16 = np.asarray(round_to_format(b, BFLOAT16), np.float64)
    # each product is chopped to 8 significant bits: relative error < 2^-7 per term
    bound = (np.abs(a16) @ np.abs(b16)) * 2.0 ** -7 + 1e-6
    assert np.all(np.abs(got - a16 @ b16) <= bound)
