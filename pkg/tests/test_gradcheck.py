"""Tests for the finite-difference helpers."""

import numpy as np
import pytest

from weakseg.gradcheck import finite_difference, max_relative_error


def test_quadratic_is_exact():
    x0 = np.array([[1.0, -2.0], [0.5, 3.0]])
    grad = finite_difference(lambda x: float(np.sum(x ** 2)), x0)
    np.testing.assert_allclose(grad, 2.0 * x0, atol=1e-9)


@pytest.mark.parametrize("points", [3, 5])
def test_log_gradient(points):
    x0 = np.linspace(0.05, 0.95, 6)
    grad = finite_difference(lambda x: float(np.sum(np.log(x))), x0, points=points)
    tolerance = 1e-5 if points == 3 else 1e-9
    assert max_relative_error(1.0 / x0, grad) < tolerance


def test_five_point_beats_three_point():
    x0 = np.array([0.02, 0.3])
    exact = 1.0 / x0
    three = finite_difference(lambda x: float(np.sum(np.log(x))), x0, h=1e-3, points=3)
    five = finite_difference(lambda x: float(np.sum(np.log(x))), x0, h=1e-3, points=5)
    assert max_relative_error(five, exact) < max_relative_error(three, exact)


def test_relative_error_scale():
    assert max_relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert max_relative_error([1.1, 2.0], [1.0, 2.0]) == pytest.approx(0.05)
