"""
Activation storage policy.

Decides per saved activation whether to keep it exact or as a rank-k factor,
keeps the byte ledger of what was stored, and provides the singular-spectrum
and kept-ratio analysis used to judge how compressible activations are.
"""

from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Tuple

import numpy as np

from .decompose import DecomposeMethod, LowRankFactor, decompose, reconstruct
from .errors import CompressionError, ContractViolation, DomainError, LoractError
from .linalg import as_matrix, resolve_dtype, svd
from .logger import get_logger

logger = get_logger()

DEFAULT_MIN_SIDE = 16


def parse_ratio(value):
    """Parse a compression ratio given as Fraction, number or 'p/q' string."""
    try:
        ratio = Fraction(value) if not isinstance(value, float) else Fraction(value).limit_denominator(1 << 20)
    except (TypeError, ValueError, ZeroDivisionError) as e:
        raise ContractViolation(f"invalid compression ratio {value!r}: {e}") from None
    if not 0 < ratio <= 1:
        raise ContractViolation(f"compression ratio must lie in (0, 1], got {ratio}")
    return ratio


@dataclass(frozen=True)
class CompressionPolicy:
    """
    How saved activations are stored.

    A disabled policy keeps every activation exact. An enabled one derives
    k = max(1, round(r * n)) (half away from zero), clamped to min(m, n).
    `precision` overrides the storage dtype of the factors; None keeps the
    activation's own dtype.
    """

    ratio: Fraction = Fraction(1, 2)
    method: DecomposeMethod = field(default_factory=DecomposeMethod)
    min_side: int = DEFAULT_MIN_SIDE
    precision: Optional[str] = None
    enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'ratio', parse_ratio(self.ratio))
        if self.min_side < 1:
            raise ContractViolation(f"min_side must be >= 1, got {self.min_side}")
        if self.precision is not None:
            resolve_dtype(self.precision)

    @classmethod
    def exact(cls):
        return cls(enabled=False)

    def rank_for(self, m, n):
        """Rank used for an m x n activation."""
        k = int((self.ratio * n + Fraction(1, 2)) // 1)
        return min(max(1, k), m, n)

    def describe(self):
        if not self.enabled:
            return 'exact'
        return f"{self.method.kind.value}(r={self.ratio},t={self.method.t})"


@dataclass(frozen=True)
class StoredActivation:
    """What a tape node keeps for backward: an exact matrix or a low-rank factor."""

    shape: Tuple[int, int]
    bytes_per_element: int
    exact: Optional[np.ndarray] = None
    factor: Optional[LowRankFactor] = None

    def __post_init__(self):
        if (self.exact is None) == (self.factor is None):
            raise ContractViolation("stored activation holds exactly one of exact / factor")

    @property
    def is_low_rank(self):
        return self.factor is not None

    @property
    def k(self):
        return self.factor.k if self.factor is not None else None

    @property
    def exact_bytes(self):
        m, n = self.shape
        return m * n * self.bytes_per_element

    @property
    def stored_bytes(self):
        if self.factor is None:
            return self.exact_bytes
        m, n = self.shape
        return (m + n) * self.factor.k * self.bytes_per_element


def store_exact(A):
    """Wrap A as an exact stored activation."""
    return StoredActivation(shape=A.shape, bytes_per_element=A.dtype.itemsize, exact=A)


def compress_activation(A, policy, rng, label='activation'):
    """
    Store A under a compression policy.

    The activation stays exact when the policy is disabled, when its short
    side is below `min_side`, or when (m + n) k >= m n (no saving).

    Args:
        A (np.ndarray): Activation to store
        policy (CompressionPolicy): Storage policy
        rng (SeededRng): Stream for randomized methods
        label (str): Activation label used in errors and logs

    Returns:
        StoredActivation

    Raises:
        CompressionError: If the decomposition fails
    """
    A = as_matrix(A, label)
    m, n = A.shape
    if not policy.enabled:
        return store_exact(A)
    k = policy.rank_for(m, n)
    if min(m, n) < policy.min_side or (m + n) * k >= m * n:
        logger.debug(f"{label}: {m}x{n} kept exact (k={k}, min_side={policy.min_side})")
        return store_exact(A)

    storage = resolve_dtype(policy.precision) if policy.precision else A.dtype
    try:
        factor = decompose(A, k, policy.method, rng)
    except LoractError as e:
        raise CompressionError(label, e) from e
    factor = LowRankFactor(factor.U.astype(storage, copy=False), factor.V.astype(storage, copy=False),
                           factor.method, factor.sample_indices)
    logger.debug(f"{label}: {m}x{n} stored at rank {k} ({policy.method.kind.value})")
    return StoredActivation(shape=(m, n), bytes_per_element=storage.itemsize, factor=factor)


def retrieve_activation(stored):
    """Exact activations pass through; low-rank ones are reconstructed as U V."""
    if stored.factor is None:
        return stored.exact
    return reconstruct(stored.factor)


def singular_spectrum(A):
    """Nonincreasing singular values of A."""
    return svd(A).singular_values.astype(np.float64)


def kept_ratio(sigma, energy_frac=0.9, squared=False):
    """
    Fraction of singular directions needed to retain a share of the energy.

    Energy is the plain sum of singular values; `squared=True` uses the sum
    of squares instead.

    Args:
        sigma (array-like): Nonincreasing, nonnegative singular values
        energy_frac (float): Target share in (0, 1]
        squared (bool): Use squared singular values

    Returns:
        float: j / len(sigma) for the smallest j reaching the target
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 1 or sigma.size == 0:
        raise ContractViolation("sigma must be a nonempty 1-D sequence")
    if not 0 < energy_frac <= 1:
        raise ContractViolation(f"energy_frac must lie in (0, 1], got {energy_frac}")
    if np.any(sigma < 0) or np.any(np.diff(sigma) > 0):
        raise ContractViolation("sigma must be nonnegative and nonincreasing")
    energy = np.square(sigma) if squared else sigma
    cumulative = np.cumsum(energy)
    total = cumulative[-1]
    if total <= 0.0:
        raise DomainError("kept ratio is undefined for an all-zero spectrum")
    j = int(np.searchsorted(cumulative, energy_frac * total, side='left')) + 1
    return min(j, sigma.size) / sigma.size


@dataclass(frozen=True)
class LedgerEntry:
    label: str
    rows: int
    cols: int
    k: Optional[int]
    exact_bytes: int
    stored_bytes: int

    @property
    def ratio(self):
        return self.stored_bytes / self.exact_bytes if self.exact_bytes else 1.0


@dataclass
class MemoryLedger:
    """Per-activation exact-vs-stored byte accounting."""

    entries: List[LedgerEntry] = field(default_factory=list)
    exact_total: int = 0
    stored_total: int = 0

    def record(self, label, stored):
        """Record a stored activation."""
        m, n = stored.shape
        self._add(LedgerEntry(label, m, n, stored.k, stored.exact_bytes, stored.stored_bytes))

    def record_vector(self, label, vector):
        """Record a small exact vector (e.g. RMS values)."""
        nbytes = vector.size * vector.dtype.itemsize
        self._add(LedgerEntry(label, vector.size, 1, None, nbytes, nbytes))

    def _add(self, entry):
        self.entries.append(entry)
        self.exact_total += entry.exact_bytes
        self.stored_total += entry.stored_bytes

    def merge(self, other):
        """Append another ledger's entries (used when tapes run separately)."""
        for entry in other.entries:
            self._add(entry)
        return self

    @property
    def compression_ratio(self):
        return self.stored_total / self.exact_total if self.exact_total else 1.0

    def summary(self):
        """
        Per-label rows plus a final total row.

        Returns:
            list: dicts with label, rows, cols, k, exact_bytes, stored_bytes, ratio
        """
        rows = [
            {
                'label': e.label,
                'rows': e.rows,
                'cols': e.cols,
                'k': e.k,
                'exact_bytes': e.exact_bytes,
                'stored_bytes': e.stored_bytes,
                'ratio': e.ratio,
            }
            for e in self.entries
        ]
        rows.append({
            'label': 'total',
            'rows': None,
            'cols': None,
            'k': None,
            'exact_bytes': self.exact_total,
            'stored_bytes': self.stored_total,
            'ratio': self.compression_ratio,
        })
        return rows


def ledger_record(ledger, label, stored):
    ledger.record(label, stored)


def ledger_summary(ledger):
    return ledger.summary()
