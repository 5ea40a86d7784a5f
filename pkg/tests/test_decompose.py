"""
Unit tests for the rank-k decompositions.
"""

import numpy as np
import pytest

from loract.decompose import (
    DecomposeMethod,
    MethodKind,
    approx_error,
    decompose,
    median_wall_times,
    random_projection,
    reconstruct,
    rsvd,
    sampled_ortho,
    truncated_svd,
)
from loract.errors import ContractViolation
from loract.linalg import SeededRng, gaussian_matrix
from loract.synthetic import exact_rank, low_rank_plus_noise


def _orthonormal(U, atol=1e-10):
    return np.allclose(U.T @ U, np.eye(U.shape[1]), atol=atol)


class TestTruncatedSvd:
    """Test cases for the optimal reference."""

    def test_diag_example(self):
        """Test diag(3, 2, 1) at k = 1."""
        factor = truncated_svd(np.diag([3.0, 2.0, 1.0]), 1)
        assert np.allclose(np.abs(reconstruct(factor)), np.diag([3.0, 0.0, 0.0]), atol=1e-12)
        assert approx_error(np.diag([3.0, 2.0, 1.0]), factor) == pytest.approx(2.0, rel=1e-10)

    def test_full_rank_is_exact(self):
        """Test k = min(m, n) reproduces A."""
        A = gaussian_matrix(SeededRng(1), 9, 6)
        assert approx_error(A, truncated_svd(A, 6), 'frobenius') < 1e-10

    def test_errors_monotone_in_k(self):
        """Test the spectral error is nonincreasing in k."""
        A = gaussian_matrix(SeededRng(2), 20, 12)
        errors = [approx_error(A, truncated_svd(A, k)) for k in range(1, 13)]
        assert all(b <= a + 1e-12 for a, b in zip(errors, errors[1:]))

    def test_rank_out_of_range(self):
        """Test k outside [1, min(m, n)]."""
        with pytest.raises(ContractViolation):
            truncated_svd(np.ones((4, 3)), 4)
        with pytest.raises(ContractViolation):
            truncated_svd(np.ones((4, 3)), 0)


class TestRandomizedMethods:
    """Test cases for RSVD and the row-sampling decomposition."""

    def test_rsvd_exact_rank_recovery(self):
        """Test RSVD recovers an exactly rank-k matrix."""
        A = exact_rank(SeededRng(3), 40, 30, 5)
        factor = rsvd(A, 5, 5, 1, SeededRng(4))
        assert _orthonormal(factor.U)
        assert approx_error(A, factor) <= 1e-8

    def test_sampled_exact_rank_recovery(self):
        """Test l = k, t = 1 recovers exact rank-k matrices on almost every seed."""
        recovered = 0
        for seed in range(30):
            A = exact_rank(SeededRng(seed).child('A'), 48, 24, 4)
            factor = sampled_ortho(A, 4, 4, 1, SeededRng(seed).child('method'))
            recovered += approx_error(A, factor) <= 1e-6 * np.linalg.norm(A, 2)
        assert recovered >= 29

    def test_sampled_records_indices(self):
        """Test the factor carries the sampled row indices."""
        A = gaussian_matrix(SeededRng(5), 16, 8)
        factor = sampled_ortho(A, 3, 5, 0, SeededRng(6))
        assert len(factor.sample_indices) == 5
        assert len(set(factor.sample_indices)) == 5
        assert factor.k == 3
        assert _orthonormal(factor.U)

    def test_oversampling_and_power_iterations_help(self):
        """Test mean error improves with more samples and power iterations."""
        A = low_rank_plus_noise(SeededRng(7), 64, 32, 4, tail=0.05)

        def mean_error(l, t):
            return np.mean([approx_error(A, sampled_ortho(A, 4, l, t, SeededRng(7).child(f"{l}-{t}-{i}")))
                            for i in range(20)])

        assert mean_error(16, 1) <= mean_error(4, 0) + 1e-12

    def test_sampled_needs_l_in_range(self):
        """Test k <= l <= m."""
        A = np.ones((6, 4))
        with pytest.raises(ContractViolation):
            sampled_ortho(A, 3, 2, 0, SeededRng(0))
        with pytest.raises(ContractViolation):
            sampled_ortho(A, 3, 7, 0, SeededRng(0))

    def test_determinism(self):
        """Test same seed gives identical factors."""
        A = gaussian_matrix(SeededRng(8), 20, 10)
        f1 = sampled_ortho(A, 3, 4, 1, SeededRng(9))
        f2 = sampled_ortho(A, 3, 4, 1, SeededRng(9))
        assert np.array_equal(f1.U, f2.U) and np.array_equal(f1.V, f2.V)

    def test_zero_matrix(self):
        """Test orthogonal methods on a zero matrix give U V = 0."""
        A = np.zeros((10, 6))
        for method in (DecomposeMethod.rsvd(), DecomposeMethod.sampled_ortho(), DecomposeMethod.truncated_svd()):
            factor = decompose(A, 2, method, SeededRng(1))
            assert _orthonormal(factor.U)
            assert np.allclose(reconstruct(factor), 0.0)


class TestRandomProjection:
    """Test cases for the random-projection estimator."""

    def test_shapes_and_kind(self):
        """Test U = G^T / l and V = G A shapes."""
        A = gaussian_matrix(SeededRng(10), 12, 5)
        factor = random_projection(A, 3, SeededRng(11))
        assert factor.U.shape == (12, 3)
        assert factor.V.shape == (3, 5)
        assert not factor.is_orthogonal

    def test_worse_than_sampling_on_low_rank(self):
        """Test random projection error exceeds the sampled method at l = k."""
        A = low_rank_plus_noise(SeededRng(12), 64, 32, 4)
        rp = np.mean([approx_error(A, random_projection(A, 4, SeededRng(i))) for i in range(10)])
        so = np.mean([approx_error(A, sampled_ortho(A, 4, 4, 1, SeededRng(i))) for i in range(10)])
        assert rp > so


class TestDispatch:
    """Test cases for method dispatch and Eckart-Young optimality."""

    def test_method_kinds(self):
        """Test dispatch returns the requested method tag."""
        A = gaussian_matrix(SeededRng(13), 16, 8)
        for kind in MethodKind:
            factor = decompose(A, 2, DecomposeMethod(kind), SeededRng(0))
            assert factor.method is kind

    def test_tsvd_is_optimal(self):
        """Test truncated SVD beats every method at equal k in both norms."""
        for seed in range(10):
            A = gaussian_matrix(SeededRng(seed), 24, 16)
            for k in (1, 4, 8):
                best = truncated_svd(A, k)
                for method in (DecomposeMethod.rsvd(), DecomposeMethod.sampled_ortho(),
                               DecomposeMethod.random_projection()):
                    factor = decompose(A, k, method, SeededRng(seed).child(method.kind.value))
                    for norm in ('spectral', 'frobenius'):
                        assert approx_error(A, best, norm) <= approx_error(A, factor, norm) * (1 + 1e-10) + 1e-12

    def test_method_params(self):
        """Test default l = k and explicit l."""
        assert DecomposeMethod().as_params(4) == {'method': 'sampled', 'k': 4, 'l': 4, 't': 1}
        assert DecomposeMethod.rsvd(l=10, t=2).width(4) == 10
        with pytest.raises(ContractViolation):
            DecomposeMethod(t=-1)


class TestWallTime:
    """Test cases for the interleaved timing harness."""

    def test_sampled_not_slower_than_rsvd(self):
        """Test sampling rows beats drawing a Gaussian test matrix at equal (k, l, t)."""
        A = gaussian_matrix(SeededRng(0), 64, 4096)
        methods = {'rsvd': DecomposeMethod.rsvd(16, 0), 'sampled': DecomposeMethod.sampled_ortho(16, 0)}
        walls = median_wall_times(A, 16, methods, SeededRng(1), repeats=9)
        assert set(walls) == {'rsvd', 'sampled'}
        assert walls['sampled'] <= walls['rsvd'], walls

    def test_repeats_validated(self):
        """Test at least one run per method is required."""
        with pytest.raises(ContractViolation):
            median_wall_times(np.eye(4), 1, {'tsvd': DecomposeMethod.truncated_svd()}, SeededRng(0), repeats=0)


if __name__ == '__main__':
    pytest.main([__file__])
