"""
Dense linear-algebra kernels and seeded randomness for loract.

Matrices are plain 2-D numpy arrays. Kernels never mutate their inputs and
verification paths run in float64; float32 inputs are accepted and the
results are returned in the input precision.
"""

import functools
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, ConvergenceError, DomainError

Matrix = np.ndarray

PRECISIONS = {
    'f64': np.float64,
    'f32': np.float32,
}

JACOBI_MAX_SWEEPS = 30
JACOBI_TOL = 1e-12
QR_RANK_TOL = 1e-12


def resolve_dtype(precision):
    """Map a precision tag ('f64' / 'f32') or dtype to a numpy float dtype."""
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ContractViolation(f"unknown precision tag: {precision!r}") from None
    dtype = np.dtype(precision)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ContractViolation(f"unsupported element precision: {dtype}")
    return dtype


def as_matrix(A, name='matrix'):
    """
    Validate and return A as a finite, nonempty 2-D float array.

    Args:
        A: array-like input
        name (str): Name used in error messages

    Returns:
        np.ndarray: The validated matrix (no copy when already valid)
    """
    arr = np.asarray(A)
    if arr.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ContractViolation(f"{name} must be nonempty, got shape {arr.shape}")
    if arr.dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains NaN or Inf")
    return arr


def ensure_finite(A, op):
    """Raise DomainError if an operation produced a non-finite value."""
    if not np.all(np.isfinite(A)):
        raise DomainError(f"{op} produced NaN or Inf")
    return A


class SeededRng:
    """
    Reproducible random stream.

    A stream is identified by its root seed and the chain of labels used to
    derive it; `child(label)` gives an independent stream that is the same
    every time it is derived from the same parent and label.
    """

    def __init__(self, seed, spawn_key=()):
        self.seed = int(seed)
        self.spawn_key = tuple(spawn_key)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self._generator = np.random.Generator(np.random.PCG64(sequence))
        self.position = 0

    def child(self, label):
        """Derive an independent child stream from (seed, label)."""
        key = zlib.crc32(str(label).encode('utf-8'))
        return SeededRng(self.seed, self.spawn_key + (key,))

    def uniform(self, size):
        """Draw uniforms on [0, 1)."""
        values = self._generator.random(size)
        self.position += int(np.prod(size))
        return values

    def indices_without_replacement(self, population, count):
        """Draw `count` distinct indices from range(population), in draw order."""
        picked = self._generator.choice(population, size=count, replace=False)
        self.position += count
        return [int(i) for i in picked]

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, spawn_key={self.spawn_key}, position={self.position})"


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD A = U diag(s) V^T with p = min(m, n)."""

    U: Matrix
    singular_values: np.ndarray
    V: Matrix
    sweeps: int = 0

    def reconstruct(self):
        return (self.U * self.singular_values) @ self.V.T


def matmul(A, B):
    """
    Matrix product with dimension checking.

    Args:
        A (np.ndarray): m x p matrix
        B (np.ndarray): p x n matrix

    Returns:
        np.ndarray: m x n product
    """
    A = as_matrix(A, 'A')
    B = as_matrix(B, 'B')
    if A.shape[1] != B.shape[0]:
        raise ContractViolation(f"matmul inner dimensions disagree: {A.shape} x {B.shape}")
    return ensure_finite(A @ B, 'matmul')


def gaussian_matrix(rng, m, n, dtype=np.float64):
    """
    Standard normal m x n matrix drawn by Box-Muller from the seeded stream.

    Args:
        rng (SeededRng): Source stream
        m (int): Rows
        n (int): Columns
        dtype: Element precision of the result

    Returns:
        np.ndarray: Matrix of i.i.d. N(0, 1) entries
    """
    if m < 1 or n < 1:
        raise ContractViolation(f"gaussian_matrix needs m, n >= 1, got {m}x{n}")
    count = m * n
    pairs = (count + 1) // 2
    u1 = 1.0 - rng.uniform(pairs)  # (0, 1], keeps log finite
    u2 = rng.uniform(pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    normals = np.empty(2 * pairs)
    normals[0::2] = radius * np.cos(theta)
    normals[1::2] = radius * np.sin(theta)
    return normals[:count].reshape(m, n).astype(dtype, copy=False)


def sample_rows(rng, A, l):
    """
    Sample l rows of A uniformly without replacement.

    Args:
        rng (SeededRng): Source stream
        A (np.ndarray): m x n matrix
        l (int): Number of rows to draw

    Returns:
        tuple: (l x n matrix of sampled rows in draw order, list of row indices)
    """
    A = as_matrix(A, 'A')
    m = A.shape[0]
    if not 1 <= l <= m:
        raise ContractViolation(f"sample_rows needs 1 <= l <= m, got l={l}, m={m}")
    indices = rng.indices_without_replacement(m, l)
    return A[indices, :], indices


def householder_qr(A, rng=None):
    """
    Thin Householder QR of an m x k matrix (m >= k).

    Pivots whose trailing column has norm at most 1e-12 * ||A||_F are
    numerically rank deficient. For those a seeded random reflector is used,
    so the matching column of Q is a random direction orthogonal to the
    previous ones and the diagonal entry of R is zero. Q therefore always
    has k orthonormal columns. R has a nonnegative diagonal.

    Args:
        A (np.ndarray): m x k input
        rng (SeededRng): Stream for basis completion (fixed default stream if None)

    Returns:
        tuple: (Q m x k, R k x k upper triangular)
    """
    A = as_matrix(A, 'A')
    m, k = A.shape
    if m < k:
        raise ContractViolation(f"householder_qr needs m >= k, got {m}x{k}")
    dtype = A.dtype
    R = A.astype(np.float64, copy=True)
    tol = QR_RANK_TOL * float(np.linalg.norm(R))
    completion = rng if rng is not None else SeededRng(0).child('qr-completion')

    reflectors = []
    for j in range(k):
        x = R[j:, j]
        norm_x = float(np.linalg.norm(x))
        deficient = norm_x <= tol
        if deficient:
            v = gaussian_matrix(completion, m - j, 1)[:, 0]
        else:
            v = x.copy()
            v[0] += np.copysign(norm_x, x[0])
        v /= np.linalg.norm(v)
        R[j:, j:] -= 2.0 * np.outer(v, v @ R[j:, j:])
        if deficient:
            R[j:, j] = 0.0
        else:
            R[j + 1:, j] = 0.0
        reflectors.append(v)

    Q = np.eye(m, k)
    for j in reversed(range(k)):
        v = reflectors[j]
        Q[j:, :] -= 2.0 * np.outer(v, v @ Q[j:, :])

    R = np.triu(R[:k, :])
    signs = np.where(np.diag(R) < 0.0, -1.0, 1.0)
    R *= signs[:, None]
    Q *= signs[None, :]
    return Q.astype(dtype, copy=False), R.astype(dtype, copy=False)


@functools.lru_cache(maxsize=128)
def _round_robin(n):
    """Tournament schedule: n-1 rounds of disjoint column pairs covering all pairs."""
    players = list(range(n))
    if n % 2:
        players.append(-1)
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = [(players[i], players[size - 1 - i]) for i in range(size // 2)]
        pairs = [(p, q) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def svd(A, max_sweeps=JACOBI_MAX_SWEEPS, tol=JACOBI_TOL):
    """
    Thin SVD by one-sided (Hestenes) Jacobi iteration.

    Columns are orthogonalized pairwise with plane rotations; each round of
    the tournament schedule rotates n/2 disjoint pairs at once. Iteration
    stops once a full sweep finds every pair with |u_p . u_q| at most
    tol * ||u_p|| ||u_q||.

    Args:
        A (np.ndarray): m x n input
        max_sweeps (int): Iteration cap
        tol (float): Relative off-diagonal threshold

    Returns:
        SvdResult: U (m x p), singular values (nonincreasing), V (n x p)

    Raises:
        ConvergenceError: If the cap is reached before convergence
    """
    A = as_matrix(A, 'A')
    m, n = A.shape
    if m < n:
        transposed = svd(A.T, max_sweeps=max_sweeps, tol=tol)
        return SvdResult(U=transposed.V, singular_values=transposed.singular_values,
                         V=transposed.U, sweeps=transposed.sweeps)

    dtype = A.dtype
    work = A.astype(np.float64, copy=True)
    V = np.eye(n)
    rounds = _round_robin(n)

    sweeps = 0
    residual = float('inf')
    while True:
        if sweeps == max_sweeps:
            raise ConvergenceError("one-sided Jacobi SVD did not converge", residual, sweeps)
        sweeps += 1
        residual = 0.0
        for p, q in rounds:
            up = work[:, p]
            uq = work[:, q]
            alpha = np.einsum('ij,ij->j', up, up)
            beta = np.einsum('ij,ij->j', uq, uq)
            gamma = np.einsum('ij,ij->j', up, uq)
            denom = np.sqrt(alpha * beta)
            safe = np.where(denom > 0.0, denom, 1.0)
            off = np.where(denom > 0.0, np.abs(gamma) / safe, 0.0)
            residual = max(residual, float(off.max()))
            rotate = off > tol
            if not rotate.any():
                continue
            zeta = (beta - alpha) / (2.0 * np.where(rotate, gamma, 1.0))
            t = np.where(zeta >= 0.0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.hypot(1.0, t)
            s = c * t
            c = np.where(rotate, c, 1.0)
            s = np.where(rotate, s, 0.0)
            work[:, p] = c * up - s * uq
            work[:, q] = s * up + c * uq
            vp = V[:, p]
            vq = V[:, q]
            V[:, p] = c * vp - s * vq
            V[:, q] = s * vp + c * vq
        if residual <= tol:
            break

    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind='stable')
    sigma = sigma[order]
    work = work[:, order]
    V = V[:, order]

    cutoff = sigma[0] * max(m, n) * np.finfo(np.float64).eps
    live = sigma > cutoff if sigma[0] > 0.0 else np.zeros(n, dtype=bool)
    U = np.zeros((m, n))
    U[:, live] = work[:, live] / sigma[live]
    if not live.all():
        # Null directions: complete the orthonormal basis
        Q, _ = householder_qr(U)
        U[:, ~live] = Q[:, ~live]

    return SvdResult(U=U.astype(dtype, copy=False),
                     singular_values=sigma.astype(dtype, copy=False),
                     V=V.astype(dtype, copy=False),
                     sweeps=sweeps)


def spectral_norm(A):
    """Operator 2-norm, the leading singular value."""
    return float(svd(A).singular_values[0])


def frobenius_norm(A):
    """Frobenius norm, accumulated in float64."""
    A = as_matrix(A, 'A')
    return float(np.sqrt(np.sum(np.square(A, dtype=np.float64))))
