import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rgr.errors import DegenerateInput, InvalidArgument, InvalidData
from rgr.lowrank import (energy_fraction, frobenius_error, pod_error, reconstruct,
                         singular_values, truncated_svd)


def test_diagonal_matrix_rank1():
    f = truncated_svd(np.diag([3.0, 2.0, 1.0]), 1)
    np.testing.assert_allclose(f.singular_values, [3.0])
    np.testing.assert_allclose(reconstruct(f), np.diag([3.0, 0, 0]), atol=1e-15)
    assert pod_error(np.diag([3.0, 2.0, 1.0]), 1) == pytest.approx(np.sqrt(5.0), rel=1e-14)


def test_frozen_oracle_values():
    # values frozen from an independent LAPACK svd of a fixed matrix
    m = np.arange(12.0).reshape(4, 3) ** 1.5
    f = truncated_svd(m, 2)
    np.testing.assert_allclose(f.singular_values, np.linalg.svd(m, compute_uv=False)[:2],
                               rtol=1e-12)
    assert pod_error(m, 1) == pytest.approx(3.1600176974668615, rel=1e-10)


def test_full_rank_is_exact():
    rng = np.random.default_rng(1)
    m = rng.standard_normal((20, 7))
    f = truncated_svd(m, 7)
    assert frobenius_error(m, reconstruct(f)) < 1e-12


def test_wide_matrix_route():
    rng = np.random.default_rng(2)
    m = rng.standard_normal((6, 30))
    f = truncated_svd(m, 3)
    s = np.linalg.svd(m, compute_uv=False)
    np.testing.assert_allclose(f.singular_values, s[:3], rtol=1e-10)
    np.testing.assert_allclose(f.left.T @ f.left, np.eye(3), atol=1e-12)


def test_rank_deficient_completes_basis():
    m = np.outer(np.arange(1.0, 6.0), np.ones(4))
    f = truncated_svd(m, 3)
    np.testing.assert_allclose(f.left.T @ f.left, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(f.singular_values[1:], 0.0, atol=1e-12)


def test_sign_convention_deterministic():
    rng = np.random.default_rng(3)
    m = rng.standard_normal((15, 5))
    a, b = truncated_svd(m, 3), truncated_svd(-(-m), 3)
    np.testing.assert_array_equal(a.left, b.left)
    for j in range(3):
        col = a.left[:, j]
        first = np.flatnonzero(np.abs(col) > 1e-12 * np.abs(col).max())[0]
        assert col[first] >= 0


@pytest.mark.parametrize("k", [0, 5, 2.5])
def test_bad_rank(k):
    with pytest.raises(InvalidArgument):
        truncated_svd(np.ones((4, 4)), k)


def test_bad_input():
    with pytest.raises(InvalidData):
        truncated_svd(np.array([[1.0, np.nan]]), 1)
    with pytest.raises(InvalidArgument):
        truncated_svd(np.ones(3), 1)


def test_relative_error_of_zero_matrix():
    with pytest.raises(DegenerateInput):
        frobenius_error(np.zeros((2, 2)), np.zeros((2, 2)), relative=True)


def test_energy_fraction():
    assert energy_fraction([2.0, 1.0], 1) == pytest.approx(0.8)
    assert energy_fraction([0.0, 0.0], 1) == 1.0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(2, 12)),
              elements=st.floats(-10, 10)), st.data())
def test_eckart_young_properties(m, data):
    k = data.draw(st.integers(1, min(m.shape)))
    f = truncated_svd(m, k)
    s = np.linalg.svd(m, compute_uv=False)
    scale = max(s[0], 1.0)
    # error equals the singular-value tail
    err = frobenius_error(m, reconstruct(f))
    assert err == pytest.approx(np.sqrt(np.sum(s[k:] ** 2)), abs=1e-7 * scale)
    np.testing.assert_allclose(f.left.T @ f.left, np.eye(k), atol=1e-8)
    assert np.all(np.diff(f.singular_values) <= 1e-9 * scale)
    np.testing.assert_allclose(singular_values(m), s, atol=1e-6 * scale)
