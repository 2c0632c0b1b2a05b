import numpy as np
import pytest

from utils.nas.grad_check import grad_check, numerical_gradient, relative_error


class TestRelativeError:
    def test_identical_gradients(self):
        g = np.array([1.0, -2.0, 3.0])
        assert relative_error(g, g.copy()) == 0.0

    def test_all_zero_gradients_do_not_divide_by_zero(self):
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0

    def test_scaled_by_largest_entry(self):
        assert relative_error(np.array([2.0, 0.0]), np.array([1.0, 0.0])) == pytest.approx(0.5)


class TestNumericalGradient:
    def test_quadratic(self, rng):
        point = rng.normal(size=(3, 4))
        numeric = numerical_gradient(lambda: float(np.sum(point ** 2)), point)
        np.testing.assert_allclose(numeric, 2.0 * point, atol=1e-8)

    def test_point_is_restored(self, rng):
        point = rng.normal(size=5)
        before = point.copy()
        numerical_gradient(lambda: float(np.sum(np.sin(point))), point)
        assert np.array_equal(point, before)

    def test_rejects_single_precision(self):
        point = np.ones(3, dtype=np.float32)
        with pytest.raises(TypeError):
            numerical_gradient(lambda: float(point.sum()), point)

    def test_unchecked_coordinates_are_nan(self):
        point = np.ones(4)
        numeric = numerical_gradient(lambda: float(point.sum()), point, coords=np.array([1, 3]))
        assert np.isnan(numeric[0]) and np.isnan(numeric[2])
        assert numeric[1] == pytest.approx(1.0)


class TestGradCheck:
    def test_accepts_correct_gradient(self, rng):
        point = rng.normal(size=(4, 4))
        err = grad_check(lambda: float(np.sum(np.tanh(point))), point, 1.0 - np.tanh(point) ** 2)
        assert err <= 1e-7

    def test_flags_wrong_gradient(self, rng):
        point = rng.normal(size=6)
        err = grad_check(lambda: float(np.sum(point ** 3)), point, 2.0 * point)
        assert err > 0.1

    def test_random_subset(self, rng):
        point = rng.normal(size=100)
        err = grad_check(lambda: float(np.sum(point ** 2)), point, 2.0 * point, max_coords=10, rng=rng)
        assert err <= 1e-7
