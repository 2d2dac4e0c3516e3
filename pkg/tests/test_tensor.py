import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from traindiff.errors import NonFinite, ShapeMismatch
from traindiff.tensor import (POLICIES, FloatFormat, PolicyOps, Tensor,
                              frobenius_norm, matmul, quantize, quantize_array,
                              rel_err, rel_err_arrays)


def _round_to_bits(x: float, p: int) -> float:
    # Independent oracle: exact rational round-to-nearest-even at p
    # significand bits, no clamping.
    if x == 0.0:
        return 0.0
    e = math.frexp(x)[1]
    q = Fraction(2) ** (e - p)
    scaled = Fraction(x) / q
    floor = scaled.numerator // scaled.denominator
    frac = scaled - floor
    if frac > Fraction(1, 2):
        r = floor + 1
    elif frac < Fraction(1, 2):
        r = floor
    else:
        r = floor if floor % 2 == 0 else floor + 1
    return float(r * q)


@pytest.mark.parametrize("fmt,p", [(FloatFormat.BF16, 8),
                                   (FloatFormat.FP32, 24),
                                   (FloatFormat.FP8E4M3, 4)])
def test_quantize_matches_rational_oracle(fmt, p):
    rng = np.random.default_rng(7)
    xs = np.concatenate([
        rng.standard_normal(200),
        rng.standard_normal(200) * 1e-20,
        rng.standard_normal(200) * 1e20 if fmt is not FloatFormat.FP8E4M3
        else rng.standard_normal(200) * 100,
        np.array([0.0, 1.0, -1.0, 0.2, 2.0 ** -60]),
    ])
    xs = xs[np.abs(xs) < fmt.max_finite / 2]
    got = quantize_array(xs, fmt)
    want = np.array([_round_to_bits(float(x), p) for x in xs])
    assert np.array_equal(got, want)


def test_quantize_spot_values():
    assert quantize_array(np.array(0.2), FloatFormat.BF16) == 0.2001953125
    # exact halfway cases resolve to the even significand
    assert quantize_array(np.array(1.0 + 2.0 ** -8), FloatFormat.BF16) == 1.0
    assert quantize_array(np.array(257.0), FloatFormat.BF16) == 256.0
    # grid values pass through untouched
    assert quantize_array(np.array(1.0 + 2.0 ** -7), FloatFormat.BF16) == 1.0 + 2.0 ** -7


def test_quantize_overflow_clamps_to_max_finite():
    assert quantize_array(np.array(500.0), FloatFormat.FP8E4M3) == 448.0
    assert quantize_array(np.array(-500.0), FloatFormat.FP8E4M3) == -448.0
    big = np.array(1e39)
    assert quantize_array(big, FloatFormat.BF16) == FloatFormat.BF16.max_finite


def test_quantize_rejects_non_finite():
    with pytest.raises(NonFinite):
        quantize_array(np.array([1.0, np.nan]), FloatFormat.BF16)
    with pytest.raises(NonFinite):
        quantize_array(np.array(np.inf), FloatFormat.BF16)


@pytest.mark.parametrize("fmt", list(FloatFormat))
@given(x=st.floats(min_value=-1e30, max_value=1e30,
                   allow_nan=False, allow_infinity=False))
def test_quantize_idempotent_and_bounded(fmt, x):
    if abs(x) > fmt.max_finite * 0.9:
        x = math.copysign(fmt.max_finite * 0.9, x)
    q1 = float(quantize_array(np.array(x), fmt))
    q2 = float(quantize_array(np.array(q1), fmt))
    assert q2 == q1
    assert abs(q1 - x) <= fmt.eps * abs(x)
    assert math.copysign(1, q1) == math.copysign(1, x) or q1 == 0.0


def test_eps_and_precision_constants():
    assert FloatFormat.BF16.eps == 2.0 ** -8
    assert FloatFormat.FP32.eps == 2.0 ** -24
    assert FloatFormat.FP8E4M3.eps == 2.0 ** -4
    assert FloatFormat.FP8E4M3.max_finite == 448.0


def test_rel_err_definition_cases():
    a = Tensor(np.array([1.0, 1.0]))
    b = Tensor(np.array([2.0, 2.0]))
    # ||A - B|| / ||A|| = sqrt(2) / sqrt(2)
    assert rel_err(a, b) == 1.0
    assert rel_err(a, a) == 0.0
    z = Tensor.zeros((2,))
    assert rel_err(z, z) == 0.0
    assert rel_err(z, a) == math.inf
    assert rel_err(a, z) == 1.0


@given(st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=1, max_size=16),
       st.sampled_from([2.0, 0.5, 3.0, 0.1]))
def test_rel_err_scale_invariant(xs, c):
    # values reach rel_err through the f32 payload carrier, whose squares
    # never underflow f64; raw f64 subnormal squares would break this
    a = np.array(xs, dtype=np.float32).astype(np.float64)
    b = a * 1.25 + 1.0
    r1 = rel_err_arrays(a, b)
    r2 = rel_err_arrays(a * c, b * c)
    if math.isfinite(r1):
        assert abs(r1 - r2) <= 1e-12 * max(1.0, r1)
    else:
        assert r1 == r2


def test_frobenius_norm_examples_and_permutation():
    t = Tensor(np.array([[3.0, 0.0], [0.0, 4.0]]))
    assert frobenius_norm(t) == 5.0
    rng = np.random.default_rng(3)
    x = rng.standard_normal(64)
    perm = rng.permutation(64)
    assert frobenius_norm(Tensor(x)) == frobenius_norm(Tensor(x[perm]))


def test_matmul_shape_checks():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((4, 2)))
    with pytest.raises(ShapeMismatch):
        matmul(a, b)


def test_matmul_is_partition_stable():
    # Column-sharding the right operand and concatenating the results must
    # reproduce the unsharded product bit-for-bit; this is load-bearing for
    # tensor-parallel exactness.
    rng = np.random.default_rng(11)
    a = Tensor(rng.standard_normal((16, 64)))
    b = rng.standard_normal((64, 32))
    full = matmul(a, Tensor(b)).data
    halves = [matmul(a, Tensor(b[:, :16])).data, matmul(a, Tensor(b[:, 16:])).data]
    assert np.array_equal(np.concatenate(halves, axis=1), full)
    # Row-sharding the left operand likewise slices the result exactly.
    rows = np.concatenate([matmul(Tensor(a.data[:8]), Tensor(b)).data,
                           matmul(Tensor(a.data[8:]), Tensor(b)).data], axis=0)
    assert np.array_equal(rows, full)


def test_policy_ops_fp32_is_identity():
    ops = PolicyOps(POLICIES["fp32"])
    x = np.array([0.2, 1.0 / 3.0, 1e-30])
    assert np.array_equal(ops.q(x), x)
    assert np.array_equal(ops.add(x, x), x + x)


def test_policy_ops_bf16_rounds_outputs_and_matmul_inputs():
    ops = PolicyOps(POLICIES["bf16"])
    assert float(ops.add(np.array(0.1), np.array(0.1))) == 0.2001953125
    a = np.array([[0.2]])
    b = np.array([[1.0]])
    # 0.2 is not on the bf16 grid; the matmul consumes the rounded input
    assert ops.mm(a, b)[0, 0] == 0.2001953125
    mixed = PolicyOps(POLICIES["bf16-fp8"])
    assert mixed.mm(a, b)[0, 0] == float(quantize_array(np.array(0.2), FloatFormat.FP8E4M3))


def test_quantize_tensor_wrapper():
    t = Tensor(np.array([0.2, 0.4]))
    q = quantize(t, FloatFormat.BF16)
    assert q.data[0] == 0.2001953125
