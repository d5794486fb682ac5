import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_jacobian
from sparsecot.errors import AdmissibilityError, NondifferentiableError, OracleSizeError
from sparsecot.masking import SENTINEL
from sparsecot.sparsemax import (
    simplex_project_oracle, sparsemax, sparsemax_backward, sparsemax_jacobian, sparsemax_loss,
    sparsemax_loss_rows, sparsemax_rows,
)

vectors = arrays(np.float64, st.integers(1, 12), elements=st.floats(-20, 20))


def test_symmetric_pair_is_uniform():
    p, s = sparsemax([0.5, 0.5])
    np.testing.assert_array_equal(p, [0.5, 0.5])
    assert s.indices == (0, 1)


def test_saturated_pair():
    # expected value from the enumeration oracle
    np.testing.assert_array_equal(simplex_project_oracle([2.0, 0.0]), [1.0, 0.0])
    p, s = sparsemax([2.0, 0.0])
    np.testing.assert_array_equal(p, [1.0, 0.0])
    assert s.indices == (0,)


def test_interior_pair_and_threshold():
    np.testing.assert_allclose(simplex_project_oracle([1.2, 0.8]), [0.7, 0.3], atol=1e-15)
    p, s = sparsemax([1.2, 0.8])
    np.testing.assert_allclose(p, [0.7, 0.3], atol=1e-15)
    assert s.tau == pytest.approx(0.5, abs=1e-15)


def test_sentinel_positions_are_exact_zero():
    p, s = sparsemax([0.3, SENTINEL, 0.1, SENTINEL])
    assert p[1] == 0.0 and p[3] == 0.0
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_errors():
    with pytest.raises(ValueError):
        sparsemax([])
    with pytest.raises(AdmissibilityError):
        sparsemax([SENTINEL, SENTINEL])
    with pytest.raises(IndexError):
        sparsemax_loss([1.0, 2.0], 2)
    with pytest.raises(OracleSizeError):
        simplex_project_oracle(np.zeros(17))


@given(vectors)
def test_lies_on_simplex(z):
    p, s = sparsemax(z)
    assert (p >= 0).all()
    assert abs(p.sum() - 1.0) <= 1e-12
    assert len(s) >= 1
    assert s.indices == tuple(np.flatnonzero(p > 0))


@given(vectors)
def test_order_preserving(z):
    p, _ = sparsemax(z)
    for i in range(len(z)):
        for j in range(len(z)):
            if z[i] > z[j]:
                assert p[i] >= p[j]
            elif z[i] == z[j]:
                assert p[i] == p[j]


@given(vectors, st.floats(-50, 50))
def test_shift_invariance(z, c):
    np.testing.assert_allclose(sparsemax(z)[0], sparsemax(z + c)[0], atol=1e-12)


@settings(max_examples=300)
@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-5, 5)))
def test_matches_enumeration_oracle(z):
    np.testing.assert_allclose(sparsemax(z)[0], simplex_project_oracle(z), atol=1e-9)


def test_oracle_trivial_cases():
    np.testing.assert_array_equal(simplex_project_oracle([5.0]), [1.0])
    np.testing.assert_allclose(simplex_project_oracle([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)


def test_rows_tie_break_is_deterministic():
    z = np.array([[1.0, 1.0, 0.0], [0.0, 1.0, 1.0]])
    p, tau = sparsemax_rows(z)
    np.testing.assert_allclose(p, [[0.5, 0.5, 0], [0, 0.5, 0.5]])
    np.testing.assert_allclose(tau, [0.5, 0.5])


def test_jacobian_interior_pair():
    J = sparsemax_jacobian([1.2, 0.8])
    np.testing.assert_allclose(J, [[0.5, -0.5], [-0.5, 0.5]], atol=1e-15)
    num = central_jacobian(lambda v: sparsemax(v)[0], [1.2, 0.8])
    np.testing.assert_allclose(J, num, atol=1e-8)


def test_jacobian_saturated_is_zero():
    np.testing.assert_array_equal(sparsemax_jacobian([2.0, 0.0]), np.zeros((2, 2)))


def test_jacobian_boundary_raises():
    # z = [1, 0]: tau = 0 and the second entry sits exactly on it
    with pytest.raises(NondifferentiableError):
        sparsemax_jacobian([1.0, 0.0])


@given(vectors)
def test_jacobian_rows_sum_to_zero(z):
    try:
        J = sparsemax_jacobian(z)
    except NondifferentiableError:
        return
    np.testing.assert_allclose(J.sum(axis=1), 0.0, atol=1e-12)


def test_backward_equals_jacobian_transpose(rng):
    z = rng.normal(size=7)
    g = rng.normal(size=7)
    p, _ = sparsemax(z)
    np.testing.assert_allclose(sparsemax_backward(p, g), sparsemax_jacobian(z).T @ g, atol=1e-14)


def test_loss_interior_pair():
    loss, grad = sparsemax_loss([1.2, 0.8], 0)
    np.testing.assert_allclose(grad, [-0.3, 0.3], atol=1e-15)
    # -1.2 + (1.44 - 0.25 + 0.64 - 0.25) / 2 + 0.5
    assert loss == pytest.approx(0.09, abs=1e-15)


def test_loss_minimiser_has_zero_gradient():
    loss, grad = sparsemax_loss([3.0, 0.0, -1.0], 0)
    np.testing.assert_array_equal(grad, np.zeros(3))
    assert loss == 0.0


@given(vectors, st.floats(-30, 30), st.data())
def test_loss_shift_invariant_and_nonnegative(z, c, data):
    k = data.draw(st.integers(0, len(z) - 1))
    loss, _ = sparsemax_loss(z, k)
    shifted, _ = sparsemax_loss(z + c, k)
    assert loss >= 0
    assert shifted == pytest.approx(loss, abs=1e-9 * max(1.0, np.abs(z).max() ** 2))


def test_loss_gradient_matches_finite_differences(rng):
    for _ in range(50):
        z = rng.normal(size=6)
        k = int(rng.integers(6))
        _, grad = sparsemax_loss(z, k)
        num = central_jacobian(lambda v: np.array(sparsemax_loss(v, k)[0]), z)
        np.testing.assert_allclose(grad, num, atol=1e-8)


def test_loss_rows_match_single(rng):
    z = rng.normal(size=(3, 4, 5))
    t = rng.integers(0, 5, size=(3, 4))
    losses, grads = sparsemax_loss_rows(z, t)
    for idx in np.ndindex(3, 4):
        l, g = sparsemax_loss(z[idx], int(t[idx]))
        assert losses[idx] == pytest.approx(l, abs=1e-15)
        np.testing.assert_allclose(grads[idx], g, atol=1e-15)
