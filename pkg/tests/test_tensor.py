import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparsecot.errors import DimensionError
from sparsecot.tensor import layer_norm, layer_norm_backward, matmul, matmul_sequential


def test_matmul_identity():
    b = np.array([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(matmul(np.eye(2), b), b)


def test_matmul_hand_expansion():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(matmul(a, b), [[19.0, 22.0], [43.0, 50.0]])
    np.testing.assert_array_equal(matmul_sequential(a, b), [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_zero_annihilates(rng):
    a = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(matmul(a, np.zeros((4, 2))), np.zeros((3, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_agrees_with_sequential_reference(rng):
    a = rng.normal(size=(4, 5, 7))
    b = rng.normal(size=(7, 3))
    np.testing.assert_allclose(matmul(a, b), matmul_sequential(a, b), rtol=1e-13, atol=1e-13)


def test_matmul_bit_reproducible(rng):
    a, b = rng.normal(size=(33, 65)), rng.normal(size=(65, 17))
    assert matmul(a, b).tobytes() == matmul(a.copy(), b.copy()).tobytes()


int_mats = arrays(np.float64, (3, 3), elements=st.integers(-50, 50).map(float))


@given(int_mats, int_mats, int_mats)
def test_matmul_associative_on_integers(a, b, c):
    np.testing.assert_array_equal(matmul(matmul(a, b), c), matmul(a, matmul(b, c)))


def test_layer_norm_constant_row_maps_to_beta():
    out = layer_norm(np.full((1, 3), 7.0), np.ones(3), np.zeros(3))
    np.testing.assert_array_equal(out, np.zeros((1, 3)))


def test_layer_norm_unit_pair():
    out = layer_norm(np.array([-1.0, 1.0]), np.ones(2), np.zeros(2), eps=1e-5)
    np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-4)


def test_layer_norm_beta_shift(rng):
    x, b = rng.normal(size=(4, 5)), rng.normal(size=5)
    np.testing.assert_allclose(layer_norm(x, np.ones(5), b),
                               layer_norm(x, np.ones(5), np.zeros(5)) + b, atol=1e-15)


def test_layer_norm_dimension_mismatch():
    with pytest.raises(DimensionError):
        layer_norm(np.ones((2, 3)), np.ones(4), np.zeros(4))


@settings(max_examples=200)
@given(arrays(np.float64, (6,), elements=st.floats(-100, 100)))
def test_layer_norm_row_statistics(x):
    if np.ptp(x) < 1e-3:
        return
    y = layer_norm(x, np.ones(6), np.zeros(6))
    assert abs(y.mean()) <= 1e-12
    # eps shrinks the variance to var / (var + eps); within 1e-6 of 1 once var >= 10
    assert abs(y.var() - x.var() / (x.var() + 1e-5)) < 1e-12
    if x.var() >= 10:
        assert abs(y.var() - 1.0) < 1e-6


def test_layer_norm_backward_matches_finite_differences(rng):
    x, g, b = rng.normal(size=(2, 5)), rng.normal(size=5), rng.normal(size=5)
    w = rng.normal(size=(2, 5))
    dx, dg, db = layer_norm_backward(w, x, g)
    h = 1e-6
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        num[idx] = ((layer_norm(x + e, g, b) * w).sum() - (layer_norm(x - e, g, b) * w).sum()) / (2 * h)
    np.testing.assert_allclose(dx, num, atol=1e-8)
    np.testing.assert_allclose(db, w.sum(axis=0))
