"""
Rank-k factorizations A ~ U V behind one interface.

Four methods are provided: truncated SVD (the optimal reference), randomized
SVD with a Gaussian test matrix, the sampling-based orthogonal decomposition
that uses a uniformly sampled row block of A as the test matrix, and the
random-projection estimator (1/l) G^T G A.
"""

import statistics
import time
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from .errors import ContractViolation
from .linalg import (
    as_matrix,
    frobenius_norm,
    gaussian_matrix,
    householder_qr,
    sample_rows,
    spectral_norm,
    svd,
)
from .logger import get_logger

logger = get_logger()

DEFAULT_POWER_ITERS = 1


class MethodKind(str, Enum):
    """Method tags as serialized in reports."""

    TSVD = 'tsvd'
    RSVD = 'rsvd'
    SAMPLED = 'sampled'
    RANDPROJ = 'randproj'


ORTHOGONAL_METHODS = (MethodKind.TSVD, MethodKind.RSVD, MethodKind.SAMPLED)


@dataclass(frozen=True)
class DecomposeMethod:
    """
    A method choice with its parameters.

    `l` is the oversampled width (RSVD), the number of sampled rows
    (sampled) or the sketch dimension (random projection); None means l = k.
    `t` is the number of power iterations.
    """

    kind: MethodKind = MethodKind.SAMPLED
    l: Optional[int] = None
    t: int = DEFAULT_POWER_ITERS

    def __post_init__(self):
        object.__setattr__(self, 'kind', MethodKind(self.kind))
        if self.t < 0:
            raise ContractViolation(f"power iterations must be >= 0, got {self.t}")
        if self.l is not None and self.l < 1:
            raise ContractViolation(f"l must be >= 1, got {self.l}")

    @classmethod
    def truncated_svd(cls):
        return cls(MethodKind.TSVD, None, 0)

    @classmethod
    def rsvd(cls, l=None, t=DEFAULT_POWER_ITERS):
        return cls(MethodKind.RSVD, l, t)

    @classmethod
    def sampled_ortho(cls, l=None, t=DEFAULT_POWER_ITERS):
        return cls(MethodKind.SAMPLED, l, t)

    @classmethod
    def random_projection(cls, l=None):
        return cls(MethodKind.RANDPROJ, l, 0)

    def width(self, k):
        """Test-matrix width used at rank k."""
        return k if self.l is None else self.l

    def as_params(self, k):
        return {'method': self.kind.value, 'k': k, 'l': self.width(k), 't': self.t}


@dataclass(frozen=True)
class LowRankFactor:
    """A ~ U V with U m x k and V k x n."""

    U: np.ndarray
    V: np.ndarray
    method: MethodKind
    sample_indices: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.U.ndim != 2 or self.V.ndim != 2 or self.U.shape[1] != self.V.shape[0]:
            raise ContractViolation(f"factor shapes disagree: U {self.U.shape}, V {self.V.shape}")

    @property
    def k(self):
        return self.U.shape[1]

    @property
    def shape(self):
        return (self.U.shape[0], self.V.shape[1])

    @property
    def element_count(self):
        return self.U.size + self.V.size

    @property
    def is_orthogonal(self):
        return self.method in ORTHOGONAL_METHODS


def _check_rank(A, k):
    m, n = A.shape
    if not 1 <= k <= min(m, n):
        raise ContractViolation(f"rank k={k} outside [1, {min(m, n)}] for a {m}x{n} matrix")


def _fold(A, Q, k, method, sample_indices=None):
    """Truncate a width-l orthonormal range basis Q to rank k via the SVD of Q^T A."""
    B = Q.T @ A
    if Q.shape[1] == k:
        return LowRankFactor(Q, B, method, sample_indices)
    small = svd(B)
    U = Q @ small.U[:, :k]
    V = small.singular_values[:k, None] * small.V[:, :k].T
    return LowRankFactor(U, V.astype(A.dtype, copy=False), method, sample_indices)


def truncated_svd(A, k):
    """
    Optimal rank-k approximation from the full SVD.

    Args:
        A (np.ndarray): m x n matrix
        k (int): Target rank

    Returns:
        LowRankFactor: U = leading k left singular vectors, V = diag(s_k) V_k^T
    """
    A = as_matrix(A, 'A')
    _check_rank(A, k)
    result = svd(A)
    U = result.U[:, :k]
    V = result.singular_values[:k, None] * result.V[:, :k].T
    return LowRankFactor(U, V, MethodKind.TSVD)


def _range_finder(A, Y, t, rng):
    """Orthonormal basis of range(Y) after t power iterations Y <- A (A^T Q)."""
    for _ in range(t):
        Q, _ = householder_qr(Y, rng=rng.child('qr'))
        Y = A @ (A.T @ Q)
    Q, _ = householder_qr(Y, rng=rng.child('qr'))
    return Q


def rsvd(A, k, l, t, rng):
    """
    Randomized SVD with a Gaussian test matrix.

    Args:
        A (np.ndarray): m x n matrix
        k (int): Target rank
        l (int): Test-matrix width, k <= l <= min(m, n)
        t (int): Power iterations
        rng (SeededRng): Source stream

    Returns:
        LowRankFactor: Orthonormal U (m x k), V = U^T A
    """
    A = as_matrix(A, 'A')
    _check_rank(A, k)
    m, n = A.shape
    if not k <= l <= min(m, n):
        raise ContractViolation(f"rsvd needs k <= l <= min(m, n), got k={k}, l={l}, shape={A.shape}")
    omega = gaussian_matrix(rng.child('omega'), n, l, dtype=A.dtype)
    Q = _range_finder(A, A @ omega, t, rng)
    return _fold(A, Q, k, MethodKind.RSVD)


def sampled_ortho(A, k, l, t, rng):
    """
    Sampling-based orthogonal decomposition.

    The test matrix is A_l^T, where A_l holds l rows of A sampled uniformly
    without replacement; no Gaussian matrix is generated. With l = k this is
    the plain algorithm; l > k oversamples and truncates to rank k.

    Args:
        A (np.ndarray): m x n matrix
        k (int): Target rank
        l (int): Sampled rows, k <= l <= m
        t (int): Power iterations
        rng (SeededRng): Source stream

    Returns:
        LowRankFactor: Orthonormal U (m x k), V = U^T A, with the sampled row indices
    """
    A = as_matrix(A, 'A')
    _check_rank(A, k)
    m = A.shape[0]
    if not k <= l <= m:
        raise ContractViolation(f"sampled_ortho needs k <= l <= m, got k={k}, l={l}, m={m}")
    rows, indices = sample_rows(rng.child('rows'), A, l)
    Q = _range_finder(A, A @ rows.T, t, rng)
    return _fold(A, Q, k, MethodKind.SAMPLED, tuple(indices))


def random_projection(A, l, rng):
    """
    Random-projection estimator A ~ (1/l) G^T (G A) with Gaussian G (l x m).

    Args:
        A (np.ndarray): m x n matrix
        l (int): Sketch dimension, 1 <= l <= m
        rng (SeededRng): Source stream

    Returns:
        LowRankFactor: U = G^T / l (m x l), V = G A (l x n); not orthogonal
    """
    A = as_matrix(A, 'A')
    m = A.shape[0]
    if not 1 <= l <= m:
        raise ContractViolation(f"random_projection needs 1 <= l <= m, got l={l}, m={m}")
    G = gaussian_matrix(rng.child('sketch'), l, m, dtype=A.dtype)
    return LowRankFactor(G.T / l, G @ A, MethodKind.RANDPROJ)


def decompose(A, k, method, rng):
    """
    Dispatch a rank-k decomposition by method.

    Args:
        A (np.ndarray): m x n matrix
        k (int): Target rank
        method (DecomposeMethod): Method and parameters
        rng (SeededRng): Source stream

    Returns:
        LowRankFactor
    """
    l = method.width(k)
    logger.debug(f"decompose {A.shape} method={method.kind.value} k={k} l={l} t={method.t}")
    if method.kind is MethodKind.TSVD:
        return truncated_svd(A, k)
    if method.kind is MethodKind.RSVD:
        return rsvd(A, k, l, method.t, rng)
    if method.kind is MethodKind.SAMPLED:
        return sampled_ortho(A, k, l, method.t, rng)
    return random_projection(A, l, rng)


def median_wall_times(A, k, methods, rng, repeats=9):
    """
    Median wall time of each method on A, repetitions interleaved across
    methods.

    Args:
        A (np.ndarray): m x n matrix
        k (int): Target rank
        methods (dict): name -> DecomposeMethod
        rng (SeededRng): Source stream; each run gets its own child
        repeats (int): Runs per method

    Returns:
        dict: name -> median nanoseconds
    """
    if repeats < 1:
        raise ContractViolation(f"repeats must be >= 1, got {repeats}")
    timings = {name: [] for name in methods}
    for rep in range(repeats):
        for name, method in methods.items():
            stream = rng.child(f"{name}-{rep}")
            start = time.perf_counter_ns()
            decompose(A, k, method, stream)
            timings[name].append(time.perf_counter_ns() - start)
    return {name: int(statistics.median(values)) for name, values in timings.items()}


def reconstruct(factor):
    """Dense m x n reconstruction U V."""
    return factor.U @ factor.V


def approx_error(A, factor, norm='spectral'):
    """
    ||A - U V|| in the spectral or Frobenius norm.

    Args:
        A (np.ndarray): Original matrix
        factor (LowRankFactor): Approximation
        norm (str): 'spectral' or 'frobenius'

    Returns:
        float: Approximation error
    """
    A = as_matrix(A, 'A')
    if factor.shape != A.shape:
        raise ContractViolation(f"factor shape {factor.shape} does not match matrix shape {A.shape}")
    residual = A - reconstruct(factor)
    if norm == 'spectral':
        return spectral_norm(residual)
    if norm == 'frobenius':
        return frobenius_norm(residual)
    raise ContractViolation(f"unknown norm: {norm!r}")
