"""RBF kernel utilities."""

import numpy as np
import pytest

from cellflow.errors import DataError
from cellflow.kernels import median_squared_distance, rbf_kernel, squared_distances


class TestSquaredDistances:
    def test_hand_values(self):
        X = np.array([[0.0, 0.0], [3.0, 4.0]])
        Z = np.array([[0.0, 0.0], [1.0, 0.0]])
        D = squared_distances(X, Z)
        assert np.allclose(D, [[0.0, 1.0], [25.0, 20.0]])

    def test_never_negative(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(40, 6))
        D = squared_distances(X, X)
        assert np.all(D >= 0.0)
        assert np.allclose(np.diag(D), 0.0)


class TestRbfKernel:
    def test_diagonal_and_symmetry(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(15, 3))
        K = rbf_kernel(X, X, gamma=2.0)
        assert np.allclose(np.diag(K), 1.0)
        assert np.allclose(K, K.T)
        assert np.all((K > 0.0) & (K <= 1.0))

    def test_gamma_divides(self):
        """k(x, z) = exp(-|x - z|^2 / gamma), so gamma = |x - z|^2 gives 1/e."""
        K = rbf_kernel(np.array([[0.0]]), np.array([[2.0]]), gamma=4.0)
        assert K[0, 0] == pytest.approx(np.exp(-1.0), abs=1e-15)

    def test_larger_gamma_means_wider_kernel(self):
        a = np.array([[0.0]])
        b = np.array([[3.0]])
        vals = [rbf_kernel(a, b, gamma=g)[0, 0] for g in (0.5, 1.0, 10.0, 100.0)]
        assert all(v2 > v1 for v1, v2 in zip(vals, vals[1:]))

    def test_nonpositive_gamma_rejected(self):
        X = np.zeros((2, 2))
        for g in (0.0, -1.0):
            with pytest.raises(DataError):
                rbf_kernel(X, X, gamma=g)


class TestMedianHeuristic:
    def test_hand_value(self):
        X = np.array([[0.0], [1.0], [3.0]])
        # pairwise squared distances: 1, 9, 4 -> median 4
        assert median_squared_distance(X) == pytest.approx(4.0)

    def test_two_sample_version_pools_rows(self):
        X = np.array([[0.0]])
        Z = np.array([[2.0], [4.0]])
        # pooled pairwise squared distances: 4, 16, 4 -> median 4
        assert median_squared_distance(X, Z) == pytest.approx(4.0)

    def test_duplicates_fall_back_to_one(self):
        X = np.ones((5, 2))
        assert median_squared_distance(X) == 1.0

    def test_thinning_is_deterministic(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(5000, 3))
        a = median_squared_distance(X, max_points=200)
        b = median_squared_distance(X, max_points=200)
        assert a == b

    def test_thinned_estimate_close_to_full(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(3000, 2))
        full = median_squared_distance(X, max_points=3000)
        thin = median_squared_distance(X, max_points=500)
        assert thin == pytest.approx(full, rel=0.2)
