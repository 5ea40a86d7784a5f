"""
Unit tests for the synthetic matrix generators.
"""

import numpy as np
import pytest

from loract.bounds import coherence
from loract.errors import ContractViolation
from loract.linalg import SeededRng
from loract.synthetic import coherent_spike, exact_rank, from_spectrum, low_rank_plus_noise, random_orthonormal


class TestGenerators:
    """Test cases for prescribed-spectrum matrices."""

    def test_random_orthonormal(self):
        """Test orthonormal columns and the k <= m check."""
        Q = random_orthonormal(SeededRng(0), 10, 4)
        assert np.allclose(Q.T @ Q, np.eye(4), atol=1e-12)
        with pytest.raises(ContractViolation):
            random_orthonormal(SeededRng(0), 3, 4)

    def test_from_spectrum(self):
        """Test the singular values are the ones requested."""
        sigma = [5.0, 2.0, 0.5]
        A = from_spectrum(SeededRng(1), 12, 7, sigma)
        assert A.shape == (12, 7)
        assert np.allclose(np.linalg.svd(A, compute_uv=False)[:3], sigma, rtol=1e-10)
        assert np.linalg.matrix_rank(A) == 3

    def test_from_spectrum_rejects_bad_spectra(self):
        """Test too many and negative singular values."""
        with pytest.raises(ContractViolation):
            from_spectrum(SeededRng(0), 4, 3, [1.0, 1.0, 1.0, 1.0])
        with pytest.raises(ContractViolation):
            from_spectrum(SeededRng(0), 4, 3, [1.0, -1.0])

    def test_exact_rank(self):
        """Test singular values 1, 1/2, ..., 1/k followed by zeros."""
        sigma = np.linalg.svd(exact_rank(SeededRng(2), 20, 10, 4), compute_uv=False)
        assert np.allclose(sigma[:4], [1.0, 0.5, 1 / 3, 0.25], rtol=1e-10)
        assert np.all(sigma[4:] < 1e-12)

    def test_low_rank_plus_noise(self):
        """Test the dominant block and the flat tail."""
        sigma = np.linalg.svd(low_rank_plus_noise(SeededRng(3), 30, 12, 3, top=2.0, tail=1e-2),
                              compute_uv=False)
        assert np.allclose(sigma[:3], [2.0, 1.5, 1.0], rtol=1e-10)
        assert np.allclose(sigma[3:], 1e-2, rtol=1e-8)

    def test_reproducible(self):
        """Test the same seed gives the same matrix."""
        assert np.array_equal(exact_rank(SeededRng(9), 8, 6, 2), exact_rank(SeededRng(9), 8, 6, 2))


class TestCoherentSpike:
    """Test cases for the coherent test family."""

    def test_top_direction_is_first_row(self):
        """Test the top left singular vector is +-e_1 with maximal coherence."""
        sigma = [3.0, 1.0, 0.5]
        A = coherent_spike(SeededRng(4), 16, 8, sigma)
        U, s, _ = np.linalg.svd(A, full_matrices=False)
        assert np.allclose(s[:3], sigma, rtol=1e-10)
        assert abs(U[0, 0]) == pytest.approx(1.0, abs=1e-10)
        assert coherence(U[:, :1]) == pytest.approx(16.0, rel=1e-8)

    def test_single_value(self):
        """Test a one-value spectrum is a rank-one spike on row 0."""
        A = coherent_spike(SeededRng(5), 6, 4, [2.0])
        assert np.allclose(A[1:], 0.0)
        assert np.linalg.norm(A[0]) == pytest.approx(2.0)

    def test_needs_room(self):
        """Test the spectrum must be shorter than the row count."""
        with pytest.raises(ContractViolation):
            coherent_spike(SeededRng(0), 3, 3, [1.0, 1.0, 1.0])


if __name__ == '__main__':
    pytest.main([__file__])
