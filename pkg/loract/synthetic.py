"""
Synthetic test matrices with a prescribed singular spectrum.

All generators draw from a SeededRng and build A = U diag(sigma) V^T with
random orthonormal U, V, so results depend only on the seed.
"""

import numpy as np

from .errors import ContractViolation
from .linalg import gaussian_matrix, householder_qr


def random_orthonormal(rng, m, k):
    """m x k matrix with orthonormal columns (Q of a Gaussian matrix)."""
    if not 1 <= k <= m:
        raise ContractViolation(f"need 1 <= k <= m, got m={m}, k={k}")
    Q, _ = householder_qr(gaussian_matrix(rng.child('gauss'), m, k), rng=rng.child('qr'))
    return Q


def from_spectrum(rng, m, n, sigma):
    """
    m x n matrix with singular values `sigma` and random singular vectors.

    Args:
        rng (SeededRng): Source stream
        m (int): Rows
        n (int): Columns
        sigma (array-like): At most min(m, n) nonnegative values

    Returns:
        np.ndarray: float64 matrix
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    p = sigma.size
    if p == 0 or p > min(m, n):
        raise ContractViolation(f"spectrum of length {p} does not fit a {m}x{n} matrix")
    if np.any(sigma < 0):
        raise ContractViolation("singular values must be nonnegative")
    U = random_orthonormal(rng.child('left'), m, p)
    V = random_orthonormal(rng.child('right'), n, p)
    return (U * sigma) @ V.T


def exact_rank(rng, m, n, k):
    """Rank-k matrix with singular values 1..1/k."""
    return from_spectrum(rng, m, n, 1.0 / np.arange(1, k + 1))


def low_rank_plus_noise(rng, m, n, k, top=1.0, tail=1e-3):
    """
    k dominant singular values decaying from `top` plus a flat noise tail.

    Returns:
        np.ndarray: Matrix with sigma_1..sigma_k in [top/2, top] and the
        remaining min(m, n) - k values equal to `tail`
    """
    p = min(m, n)
    if not 1 <= k <= p:
        raise ContractViolation(f"need 1 <= k <= {p}, got k={k}")
    head = top * np.linspace(1.0, 0.5, k)
    sigma = np.concatenate([head, np.full(p - k, tail)])
    return from_spectrum(rng, m, n, sigma)


def coherent_spike(rng, m, n, sigma):
    """
    Matrix whose first left singular vector is e_1.

    Same spectrum as from_spectrum(rng, m, n, sigma), but the top left
    singular direction lives on a single row, so uniform row sampling misses
    it unless that row is drawn.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    p = sigma.size
    if p == 0 or p > min(m, n) or p >= m:
        raise ContractViolation(f"spectrum of length {p} does not fit a coherent {m}x{n} matrix")
    rest = random_orthonormal(rng.child('left'), m - 1, p - 1) if p > 1 else np.zeros((m - 1, 0))
    U = np.zeros((m, p))
    U[0, 0] = 1.0
    U[1:, 1:] = rest
    V = random_orthonormal(rng.child('right'), n, p)
    return (U * sigma) @ V.T
