import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from twistlab.errors import InvalidInputError
from twistlab.numerics import (
    batch_std_profile,
    check_prob_matrix,
    entropy,
    mean_distribution,
    row_entropy,
    row_kl,
    stable_softmax,
)

# frozen from tests/oracles.py (mpmath, 50 digits)
SOFTMAX_123 = [0.090030573170380457998, 0.24472847105479765247, 0.66524095577482188953]
ENTROPY_09_01 = 0.32508297339144823951
KL_09_08 = 0.036690014034750578143

finite_logits = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 6)),
                       elements=st.floats(-50, 50))


def test_softmax_zero_row_is_uniform():
    np.testing.assert_array_equal(stable_softmax([[0.0, 0.0]]), [[0.5, 0.5]])


def test_softmax_oracle():
    np.testing.assert_allclose(stable_softmax([[1.0, 2.0, 3.0]])[0], SOFTMAX_123, rtol=0, atol=1e-15)


def test_softmax_large_logits_do_not_overflow():
    p = stable_softmax([[1000.0, 0.0], [-1000.0, -1000.0]])
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p[1], [0.5, 0.5])


@given(finite_logits, st.floats(-100, 100))
def test_softmax_shift_invariance(z, c):
    np.testing.assert_allclose(stable_softmax(z + c), stable_softmax(z), atol=1e-12)


@given(finite_logits)
def test_softmax_rows_sum_to_one(z):
    p = stable_softmax(z)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_rejects_nonfinite():
    with pytest.raises(InvalidInputError):
        stable_softmax([[np.nan, 0.0]])


def test_row_entropy_cases():
    np.testing.assert_array_equal(row_entropy([[1.0, 0, 0, 0]]), [0.0])
    assert row_entropy([[0.25] * 4])[0] == pytest.approx(math.log(4), abs=1e-15)
    assert row_entropy([[0.9, 0.1]])[0] == pytest.approx(ENTROPY_09_01, abs=1e-15)


@given(finite_logits)
def test_row_entropy_bounds(z):
    h = row_entropy(stable_softmax(z))
    assert np.all(h >= 0)
    assert np.all(h <= math.log(z.shape[1]) + 1e-12)


def test_check_prob_matrix_rejects_bad_rows():
    with pytest.raises(InvalidInputError):
        check_prob_matrix([[0.5, 0.6]])
    with pytest.raises(InvalidInputError):
        check_prob_matrix([[1.2, -0.2]])


def test_mean_distribution_cases():
    np.testing.assert_allclose(mean_distribution([[1.0, 0], [0, 1.0]]), [0.5, 0.5])
    np.testing.assert_array_equal(mean_distribution([[0.3, 0.7]]), [0.3, 0.7])
    np.testing.assert_allclose(mean_distribution([[0.9, 0.1], [0.2, 0.8], [0.4, 0.6]]), [0.5, 0.5],
                               atol=1e-15)


def test_entropy_of_distribution():
    assert entropy([0.5, 0.5]) == pytest.approx(math.log(2))


def test_row_kl_cases():
    p = np.array([[0.2, 0.3, 0.5]])
    np.testing.assert_array_equal(row_kl(p, p), [0.0])
    assert row_kl([[1.0, 0.0]], [[0.5, 0.5]])[0] == pytest.approx(math.log(2), abs=1e-15)
    assert row_kl([[0.9, 0.1]], [[0.8, 0.2]])[0] == pytest.approx(KL_09_08, abs=1e-15)


def test_row_kl_with_zero_in_q_is_finite():
    assert np.isfinite(row_kl([[0.5, 0.5]], [[1.0, 0.0]])).all()


@given(finite_logits, st.integers(0, 2**32 - 1))
def test_row_kl_nonnegative(z, seed):
    q = stable_softmax(np.random.default_rng(seed).standard_normal(z.shape))
    assert np.all(row_kl(stable_softmax(z), q) >= 0)


def test_batch_std_profile_cases():
    col, row = batch_std_profile(np.full((3, 4), 2.5))
    np.testing.assert_array_equal(col, 0)
    np.testing.assert_array_equal(row, 0)
    col, row = batch_std_profile([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_allclose(col, [1, 1])
    np.testing.assert_allclose(row, [0.5, 0.5])


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=st.floats(-1e3, 1e3)))
def test_batch_std_profile_duplication_invariance(m):
    col, _ = batch_std_profile(m)
    col2, _ = batch_std_profile(np.vstack([m, m]))
    np.testing.assert_allclose(col2, col, atol=1e-9)
