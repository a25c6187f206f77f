import numpy as np
import pytest

from dome.exceptions import InvalidArgumentError
from dome.oracles import brute_force_svd, central_difference, largest_principal_angle, numerical_rank

from .utils import orthonormal, rng


class TestBruteForceSvd:
    def test_matches_numpy(self):
        g = rng(1).generator().standard_normal((8, 20))
        u, values = brute_force_svd(g)
        expected = np.linalg.svd(g, compute_uv=False)
        assert np.allclose(values, expected, rtol=1e-8)
        assert np.allclose(u.T @ u, np.eye(8), atol=1e-10)

    def test_low_rank_subspace(self):
        p = orthonormal(10, 3, seed=2)
        g = p @ (np.array([[5.0], [2.0], [1.0]]) * rng(2).generator().standard_normal((3, 40)))
        u, values = brute_force_svd(g)
        assert numerical_rank(values, 1e-8) == 3
        assert largest_principal_angle(u[:, :3], p) < 1e-6

    def test_zero_matrix(self):
        u, values = brute_force_svd(np.zeros((3, 2)))
        assert np.array_equal(u, np.eye(3))
        assert np.array_equal(values, np.zeros(3))

    def test_rejects_empty(self):
        with pytest.raises(InvalidArgumentError):
            brute_force_svd(np.zeros((0, 2)))


class TestAngles:
    def test_same_span(self):
        p = orthonormal(6, 2)
        rotated = p @ np.array([[0.0, 1.0], [1.0, 0.0]])
        assert largest_principal_angle(p, rotated) == pytest.approx(0.0, abs=1e-7)

    def test_orthogonal_spans(self):
        assert largest_principal_angle(np.eye(4)[:, :1], np.eye(4)[:, 1:2]) == pytest.approx(np.pi / 2)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            largest_principal_angle(np.eye(3), np.eye(4))


class TestCentralDifference:
    def test_quadratic(self):
        a = np.array([[2.0, 1.0], [1.0, 3.0]])
        theta = np.array([0.5, -1.0])
        gradient = central_difference(lambda t: 0.5 * t @ a @ t, theta)
        assert np.allclose(gradient, a @ theta, atol=1e-8)

    @pytest.mark.parametrize(
        ("values", "expected"),
        (
            pytest.param([3.0, 1.0, 1e-12], 2, id="gap"),
            pytest.param([0.0, 0.0], 0, id="zero"),
        ),
    )
    def test_numerical_rank(self, values, expected):
        assert numerical_rank(np.array(values), 1e-8) == expected
