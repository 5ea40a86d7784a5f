"""
Numerical verification of the error bounds behind activation compression.

Four checks are provided:

- deterministic: ||A - P_Y A||^2 <= ||S2||^2 + ||S2 O2 pinv(O1)||^2 for
  Y = A Omega, O1 = V1^T Omega, O2 = V2^T Omega (a hard inequality).
- projection_floor: the mean spectral error of the random-projection
  estimator stays above sqrt((m - l)/(m + 1)) ||A|| (Monte Carlo, 3 sigma).
- sampling: qualitative behavior of the row-sampling decomposition
  (error falls with l, rises with coherence, beats random projection,
  stays within a small multiple of sigma_(k+1) when the spectrum has a gap).
- accumulation: the loss change caused by compressing N chained activations
  is at most sqrt(2) L_W sum_i L^(N-i) sigma_i, and compressing saved
  activations never changes the forward output.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from .autodiff import Tape
from .compress import CompressionPolicy, compress_activation, retrieve_activation
from .config import CHECKS
from .decompose import DecomposeMethod, approx_error, decompose, random_projection
from .errors import ContractViolation
from .linalg import (
    SeededRng,
    as_matrix,
    gaussian_matrix,
    householder_qr,
    spectral_norm,
    svd,
)
from .logger import get_logger
from .synthetic import coherent_spike, exact_rank, from_spectrum, low_rank_plus_noise

logger = get_logger()

DETERMINISTIC_REL_TOL = 1e-10
ROUNDOFF_FACTOR = 16.0
NOISE_FLOOR_FACTOR = 10.0
ORTHONORMAL_TOL = 1e-6
FULL_ROW_RANK_TOL = 1e-10
MC_SIGMAS = 3.0
MIN_MC_TRIALS = 100
ACCUMULATION_ABS_TOL = 1e-12


@dataclass(frozen=True)
class SvdPartition:
    """Thin SVD of A split after the k-th singular triple."""

    sigma1: np.ndarray
    sigma2: np.ndarray
    U_k: np.ndarray
    V1: np.ndarray
    V2: np.ndarray

    @classmethod
    def of(cls, A, k):
        result = svd(A)
        p = result.singular_values.size
        if not 1 <= k <= p:
            raise ContractViolation(f"split k={k} outside [1, {p}]")
        s = result.singular_values
        return cls(s[:k], s[k:], result.U[:, :k], result.V[:, :k], result.V[:, k:])

    @property
    def tail_norm(self):
        return float(self.sigma2[0]) if self.sigma2.size else 0.0


@dataclass
class BoundCheckResult:
    """One bound instance: lhs <= rhs is the claim being checked."""

    check: str
    params: Dict[str, Any]
    lhs: float
    rhs: float
    holds: bool
    trials: int = 1
    mc_stderr: Optional[float] = None
    status: str = ''
    seed: Optional[int] = None

    def __post_init__(self):
        if not self.status:
            self.status = 'pass' if self.holds else 'fail'

    @classmethod
    def skipped(cls, check, params, reason, seed=None):
        return cls(check, dict(params, reason=reason), math.nan, math.nan, True, status='skipped', seed=seed)

    def to_record(self):
        """Flat record for JSON/CSV reports."""
        return {
            'theorem': self.check,
            'params': self.params,
            'lhs': self.lhs,
            'rhs': self.rhs,
            'stderr': self.mc_stderr,
            'holds': self.holds,
            'status': self.status,
            'trials': self.trials,
            'seed': self.seed,
        }


def _parallel_map(fn, items, threads=1):
    """Order-preserving map, threaded when threads > 1."""
    items = list(items)
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(fn, items))


def _mean_stderr(values):
    values = np.asarray(values, dtype=np.float64)
    mean = math.fsum(values) / values.size
    if values.size < 2:
        return mean, 0.0
    var = math.fsum((values - mean) ** 2) / (values.size - 1)
    return mean, math.sqrt(var / values.size)


def coherence(U_k, squared=False):
    """
    Coherence (m/k) max_i ||U_k[i, :]||_2 of an orthonormal column block.

    Args:
        U_k (np.ndarray): m x k matrix with orthonormal columns
        squared (bool): Use the squared row norm (conventional definition)

    Returns:
        float
    """
    U_k = as_matrix(U_k, 'U_k').astype(np.float64)
    m, k = U_k.shape
    gram_error = np.max(np.abs(U_k.T @ U_k - np.eye(k)))
    if gram_error > ORTHONORMAL_TOL:
        raise ContractViolation(f"U_k columns are not orthonormal (max |U^T U - I| = {gram_error:.2e})")
    row_norms = np.sqrt(np.sum(U_k * U_k, axis=1))
    peak = float(np.max(row_norms))
    return (m / k) * (peak * peak if squared else peak)


def roundoff_floor(A, conditioning=1.0):
    """
    Rounding level of a computed projection error of A:
    ROUNDOFF_FACTOR max(m, n) eps ||A||_2 max(1, conditioning).

    `conditioning` is ||Y|| / sigma_k(Y) of the sketch whose basis projects A.
    """
    m, n = A.shape
    scale = max(1.0, float(conditioning))
    return ROUNDOFF_FACTOR * max(m, n) * float(np.finfo(np.float64).eps) * spectral_norm(A) * scale


def check_deterministic_bound(A, Omega, k, seed=None):
    """
    Check ||A - Q Q^T A||^2 <= ||S2||^2 + ||S2 O2 pinv(O1)||^2, Q = qr(A Omega).Q.

    Instances where O1 = V1^T Omega lacks full row rank are skipped. The
    comparison allows the square of `roundoff_floor`; when sigma_(k+1) is
    below that floor the instance is flagged exact_rank and lhs must be at
    rounding level.

    Args:
        A (np.ndarray): m x n matrix
        Omega (np.ndarray): n x l test matrix
        k (int): Split point
        seed (int): Recorded in the result

    Returns:
        BoundCheckResult
    """
    A = as_matrix(A, 'A').astype(np.float64)
    Omega = as_matrix(Omega, 'Omega').astype(np.float64)
    m, n = A.shape
    if Omega.shape[0] != n:
        raise ContractViolation(f"Omega must have {n} rows, got {Omega.shape}")
    l = Omega.shape[1]
    params = {'m': m, 'n': n, 'k': k, 'l': l}
    if l > m:
        raise ContractViolation(f"test-matrix width l={l} exceeds m={m}")
    part = SvdPartition.of(A, k)
    omega1 = part.V1.T @ Omega
    if l < k:
        return BoundCheckResult.skipped('deterministic', params, 'precondition unmet: l < k', seed)
    omega1_min = float(svd(omega1).singular_values[-1])
    if omega1_min <= FULL_ROW_RANK_TOL:
        logger.warning(f"deterministic bound skipped: sigma_min(Omega1) = {omega1_min:.2e}")
        return BoundCheckResult.skipped('deterministic', params, 'precondition unmet: Omega1 rank deficient', seed)

    Y = A @ Omega
    y_sigma = svd(Y).singular_values
    if y_sigma[k - 1] <= 0.0:
        return BoundCheckResult.skipped('deterministic', params, 'precondition unmet: A Omega rank deficient', seed)
    Q, _ = householder_qr(Y, rng=SeededRng(0 if seed is None else seed).child('qr'))
    lhs = spectral_norm(A - Q @ (Q.T @ A)) ** 2
    cross = (part.sigma2[:, None] * (part.V2.T @ Omega)) @ np.linalg.pinv(omega1)
    rhs = part.tail_norm ** 2 + (spectral_norm(cross) ** 2 if cross.size else 0.0)
    floor = roundoff_floor(A, y_sigma[0] / y_sigma[k - 1])
    params['roundoff_floor'] = floor
    params['exact_rank'] = bool(part.tail_norm <= floor)
    holds = lhs <= rhs * (1.0 + DETERMINISTIC_REL_TOL) + floor ** 2
    return BoundCheckResult('deterministic', params, float(lhs), float(rhs), bool(holds), seed=seed)


def mc_random_projection_floor(A, l, trials, rng, threads=1):
    """
    Monte Carlo check that E||(1/l) G^T G A - A|| stays above
    sqrt((m - l)/(m + 1)) ||A||.

    Args:
        A (np.ndarray): m x n matrix
        l (int): Sketch dimension, l < m
        trials (int): Number of Gaussian draws, >= 100
        rng (SeededRng): Each trial uses the child 'trial-i'
        threads (int): Worker threads

    Returns:
        BoundCheckResult: lhs = floor, rhs = observed mean
    """
    A = as_matrix(A, 'A').astype(np.float64)
    m = A.shape[0]
    if not 1 <= l < m:
        raise ContractViolation(f"random-projection floor needs 1 <= l < m, got l={l}, m={m}")
    if trials < MIN_MC_TRIALS:
        raise ContractViolation(f"need at least {MIN_MC_TRIALS} trials, got {trials}")
    floor = math.sqrt((m - l) / (m + 1)) * spectral_norm(A)
    errors = _parallel_map(
        lambda i: approx_error(A, random_projection(A, l, rng.child(f"trial-{i}"))),
        range(trials), threads)
    mean, stderr = _mean_stderr(errors)
    holds = floor <= mean + MC_SIGMAS * stderr
    return BoundCheckResult('projection_floor', {'m': m, 'n': A.shape[1], 'l': l},
                            floor, mean, bool(holds), trials, stderr, seed=rng.seed)


def mc_method_error(A, k, method, trials, rng, threads=1):
    """Mean and standard error of the spectral error of a randomized method."""
    errors = _parallel_map(
        lambda i: approx_error(A, decompose(A, k, method, rng.child(f"trial-{i}"))),
        range(trials), threads)
    return _mean_stderr(errors)


def compare_projection_to_sampling(A, k, trials, rng, threads=1):
    """
    Sampled-orthogonal error against random-projection error at l = k.

    Returns:
        BoundCheckResult: lhs = sampled mean, rhs = random-projection mean
    """
    A = as_matrix(A, 'A').astype(np.float64)
    sampled, se_sampled = mc_method_error(A, k, DecomposeMethod.sampled_ortho(k, 1), trials,
                                          rng.child('sampled'), threads)
    projected, se_projected = mc_method_error(A, k, DecomposeMethod.random_projection(k), trials,
                                              rng.child('randproj'), threads)
    stderr = math.hypot(se_sampled, se_projected)
    return BoundCheckResult('sampling', {'variant': 'vs_randproj', 'm': A.shape[0], 'n': A.shape[1], 'k': k},
                            sampled, projected, bool(sampled < projected + MC_SIGMAS * stderr),
                            trials, stderr, seed=rng.seed)


def mc_noise_floor(generator, k, trials, rng, t=1, threads=1):
    """
    Mean sampled-orthogonal error at l = k against NOISE_FLOOR_FACTOR times
    the mean sigma_(k+1) on a matrix family with a clear gap after k.

    Each trial draws a fresh matrix; the right-hand side also carries the
    mean `roundoff_floor` so exact-rank families are judged at rounding level.

    Returns:
        BoundCheckResult: lhs = mean error, rhs = factor * mean sigma_(k+1) + rounding
    """
    method = DecomposeMethod.sampled_ortho(k, t)

    def trial(i):
        A = generator(rng.child(f"matrix-{i}"))
        sigma = svd(A).singular_values
        tail = float(sigma[k]) if sigma.size > k else 0.0
        rounding = roundoff_floor(A, (sigma[0] / sigma[k - 1]) ** (2 * t + 2))
        return approx_error(A, decompose(A, k, method, rng.child(f"trial-{i}"))), tail, rounding, A.shape

    outcomes = _parallel_map(trial, range(trials), threads)
    mean, stderr = _mean_stderr([o[0] for o in outcomes])
    tail = math.fsum(o[1] for o in outcomes) / trials
    rounding = math.fsum(o[2] for o in outcomes) / trials
    rhs = NOISE_FLOOR_FACTOR * tail + rounding
    m, n = outcomes[0][3]
    params = {'variant': 'noise_floor', 'm': m, 'n': n, 'k': k, 't': t,
              'mean_tail': tail, 'factor': NOISE_FLOOR_FACTOR}
    return BoundCheckResult('sampling', params, mean, rhs, bool(mean <= rhs), trials, stderr, seed=rng.seed)


@dataclass
class ScalingReport:
    """Mean sampled-orthogonal error per sample count l."""

    k: int
    t: int
    rows: List[Dict[str, float]] = field(default_factory=list)
    trials: int = 0

    @property
    def monotone(self):
        """Mean error nonincreasing in l, within two standard errors."""
        for prev, cur in zip(self.rows, self.rows[1:]):
            if cur['mean_err'] > prev['mean_err'] + 2.0 * (prev['stderr'] + cur['stderr']):
                return False
        return True

    def to_result(self, seed=None):
        first, last = self.rows[0], self.rows[-1]
        return BoundCheckResult('sampling',
                                {'variant': 'l_sweep', 'k': self.k, 't': self.t,
                                 'l_values': [r['l'] for r in self.rows]},
                                last['mean_err'], first['mean_err'] + 2.0 * first['stderr'],
                                self.monotone, self.trials, last['stderr'], seed=seed)


def mc_sampling_scaling(generator, k, l_values, trials, rng, t=1, threads=1):
    """
    Sweep the sampled-orthogonal method over l on a matrix family.

    Each trial draws a fresh matrix from `generator(rng)`; the same matrices
    are reused across l values.

    Args:
        generator (callable): SeededRng -> matrix
        k (int): Target rank
        l_values (list): Increasing sample counts
        trials (int): Matrices per l
        rng (SeededRng): Source stream
        t (int): Power iterations
        threads (int): Worker threads

    Returns:
        ScalingReport
    """
    if sorted(l_values) != list(l_values) or not l_values:
        raise ContractViolation(f"l_values must be a nonempty increasing list, got {l_values}")
    matrices = [generator(rng.child(f"matrix-{i}")) for i in range(trials)]
    report = ScalingReport(k=k, t=t, trials=trials)
    for l in l_values:
        method = DecomposeMethod.sampled_ortho(l, t)

        def error(i, method=method, l=l):
            A = matrices[i]
            return approx_error(A, decompose(A, k, method, rng.child(f"l-{l}-trial-{i}")))

        mean, stderr = _mean_stderr(_parallel_map(error, range(trials), threads))
        report.rows.append({'l': l, 'mean_err': mean, 'stderr': stderr})
        logger.debug(f"sampling sweep k={k} l={l}: mean error {mean:.4e} +- {stderr:.1e}")
    return report


def mc_coherence_effect(m, n, sigma, k, trials, rng, threads=1):
    """
    Same spectrum, coherent vs incoherent singular vectors, l = k.

    Returns:
        BoundCheckResult: lhs = incoherent mean error, rhs = coherent mean error
    """
    method = DecomposeMethod.sampled_ortho(k, 0)

    def errors_for(build, label):
        def error(i):
            A = build(rng.child(f"{label}-matrix-{i}"), m, n, sigma)
            return approx_error(A, decompose(A, k, method, rng.child(f"{label}-trial-{i}")))
        return _mean_stderr(_parallel_map(error, range(trials), threads))

    incoherent, se_i = errors_for(from_spectrum, 'incoherent')
    coherent, se_c = errors_for(coherent_spike, 'coherent')
    stderr = math.hypot(se_i, se_c)
    return BoundCheckResult('sampling', {'variant': 'coherence', 'm': m, 'n': n, 'k': k},
                            incoherent, coherent, bool(incoherent <= coherent + MC_SIGMAS * stderr),
                            trials, stderr, seed=rng.seed)


def _chain_loss(activations, fusion, head, labels):
    H = activations[0]
    for M, A in zip(fusion, activations[1:]):
        H = H @ M + A
    tape = Tape(record=False)
    return float(tape.cross_entropy(tape.constant(H @ head), labels).value[0, 0])


def _tape_forward(activations, fusion, head, labels, policy, rng):
    """Chain forward on a recording tape whose saved activations follow `policy`."""
    tape = Tape(policy, rng, label='chain')
    h = tape.leaf(activations[0], name='stage-0')
    for i, (M, A) in enumerate(zip(fusion, activations[1:]), start=1):
        h = tape.add(tape.matmul(h, tape.leaf(M, name=f"fusion-{i}")), tape.leaf(A, name=f"stage-{i}"))
    logits = tape.matmul(h, tape.leaf(head, name='head'))
    loss = tape.cross_entropy(logits, labels)
    tape.backward(loss)
    return logits.value, loss.value


def check_error_accumulation(chain, fusion, head, labels, rng, seed=None):
    """
    Check L(F) - L(F_comp) <= sqrt(2) L_W sum_i L^(N-i) sigma_i on a linear chain.

    The chain is H_1 = A_1, H_(i+1) = H_i M_i + A_(i+1), logits = H_N W and
    the loss is mean cross-entropy. F_comp replaces each A_i by its stored
    approximation under the stage policy; sigma_i is the actual spectral
    error, L the largest ||M_i||, L_W = ||W||. Also checks that a tape using
    the compression policy produces bit-identical forward values.

    Args:
        chain (list): (activation, CompressionPolicy) per stage
        fusion (list): N - 1 linear maps as matrices
        head (np.ndarray): Final linear layer
        labels (array-like): Class labels, one per row
        rng (SeededRng): Stream for the decompositions
        seed (int): Recorded in the result

    Returns:
        BoundCheckResult
    """
    if not chain:
        raise ContractViolation("chain must hold at least one activation")
    if len(fusion) != len(chain) - 1:
        raise ContractViolation(f"need {len(chain) - 1} fusion maps, got {len(fusion)}")
    if any(not isinstance(M, np.ndarray) for M in list(fusion) + [head]):
        raise ContractViolation("fusion maps and head must be linear maps given as matrices")
    activations = [as_matrix(A, f"stage-{i}").astype(np.float64) for i, (A, _) in enumerate(chain)]
    fusion = [as_matrix(M, 'fusion').astype(np.float64) for M in fusion]
    head = as_matrix(head, 'head').astype(np.float64)

    approximated, sigmas = [], []
    for i, (A, (_, policy)) in enumerate(zip(activations, chain)):
        stored = compress_activation(A, policy, rng.child(f"stage-{i}"), f"stage-{i}")
        A_tilde = retrieve_activation(stored).astype(np.float64)
        approximated.append(A_tilde)
        sigmas.append(spectral_norm(A - A_tilde) if stored.is_low_rank else 0.0)

    N = len(chain)
    L = max((spectral_norm(M) for M in fusion), default=1.0)
    L_W = spectral_norm(head)
    rhs = math.sqrt(2.0) * L_W * math.fsum(L ** (N - 1 - i) * s for i, s in enumerate(sigmas))
    exact_loss = _chain_loss(activations, fusion, head, labels)
    lhs = exact_loss - _chain_loss(approximated, fusion, head, labels)

    exact_policy = CompressionPolicy.exact()
    compressing = next((p for _, p in chain if p.enabled), exact_policy)
    ref_logits, ref_loss = _tape_forward(activations, fusion, head, labels, exact_policy, rng.child('tape'))
    logits, loss = _tape_forward(activations, fusion, head, labels, compressing, rng.child('tape'))
    forward_identical = bool(np.array_equal(ref_logits, logits) and np.array_equal(ref_loss, loss))

    holds = lhs <= rhs + ACCUMULATION_ABS_TOL and forward_identical
    params = {'N': N, 'm': activations[0].shape[0], 'n': activations[0].shape[1],
              'sigmas': [float(s) for s in sigmas], 'L': float(L), 'L_W': float(L_W),
              'abs_diff': abs(lhs), 'forward_identical': forward_identical}
    return BoundCheckResult('accumulation', params, float(lhs), float(rhs), bool(holds), seed=seed)


# -- suite ------------------------------------------------------------------

def _pick(rng, options):
    return options[rng.indices_without_replacement(len(options), 1)[0]]


def _deterministic_instance(root, i):
    rng = root.child(f"deterministic-{i}")
    m, n = _pick(rng, [(24, 16), (32, 32), (40, 24), (48, 20)])
    k = _pick(rng, [1, 2, 4, 6, 8])
    l = k + _pick(rng, [0, 1, 2, 4])
    if i % 5 == 0:
        A = exact_rank(rng.child('A'), m, n, k)
    elif i % 5 == 1:
        A = low_rank_plus_noise(rng.child('A'), m, n, k)
    else:
        A = gaussian_matrix(rng.child('A'), m, n)
    Omega = gaussian_matrix(rng.child('omega'), n, l)
    return check_deterministic_bound(A, Omega, k, seed=root.seed)


def _accumulation_instance(root, policy, i):
    rng = root.child(f"accumulation-{i}")
    m, n, classes, N = 32, 16, 4, 2
    chain = [(low_rank_plus_noise(rng.child(f"act-{j}"), m, n, 4, tail=1e-2), policy) for j in range(N)]
    fusion = [gaussian_matrix(rng.child(f"fusion-{j}"), n, n) / math.sqrt(n) for j in range(N - 1)]
    head = gaussian_matrix(rng.child('head'), n, classes) / math.sqrt(n)
    labels = np.array([_pick(rng, list(range(classes))) for _ in range(m)])
    return check_error_accumulation(chain, fusion, head, labels, rng.child('compress'), seed=root.seed)


def run_bound_suite(config, checks=None, trials=None, threads=1):
    """
    Run the selected bound checks with the configured sizes.

    Args:
        config (RunConfig): Seed and [bounds] settings
        checks (list): Subset of CHECKS (default: config.bounds.checks)
        trials (int): Monte Carlo trials / deterministic instances override
        threads (int): Worker threads for independent trials

    Returns:
        list: BoundCheckResult records
    """
    checks = list(checks or config.bounds.checks)
    unknown = sorted(set(checks) - set(CHECKS))
    if unknown:
        raise ContractViolation(f"unknown checks {unknown}; choose from {list(CHECKS)}")
    root = SeededRng(config.seed).child('bounds')
    mc_trials = max(trials or config.bounds.trials, MIN_MC_TRIALS)
    instances = trials or config.bounds.instances
    results = []

    if 'deterministic' in checks:
        results += _parallel_map(lambda i: _deterministic_instance(root, i), range(instances), threads)

    if 'projection_floor' in checks:
        for m in (32, 64, 128):
            for l in (m // 8, m // 4, m // 2):
                cell = root.child(f"floor-{m}-{l}")
                A = gaussian_matrix(cell.child('A'), m, 16)
                results.append(mc_random_projection_floor(A, l, mc_trials, cell.child('trials'), threads))

    if 'sampling' in checks:
        k = 4
        sampling_trials = min(mc_trials, 200)
        family = lambda r: low_rank_plus_noise(r, 64, 32, k, tail=1e-3)
        results.append(mc_sampling_scaling(family, k, [k, 2 * k, 4 * k], sampling_trials,
                                           root.child('scaling'), t=1, threads=threads).to_result(root.seed))
        sigma = np.concatenate([np.linspace(1.0, 0.5, k), np.full(12, 1e-3)])
        results.append(mc_coherence_effect(64, 32, sigma, k, sampling_trials, root.child('coherence'), threads))
        A = low_rank_plus_noise(root.child('comparison-A'), 64, 32, k)
        results.append(compare_projection_to_sampling(A, k, sampling_trials, root.child('comparison'), threads))
        results.append(mc_noise_floor(family, k, sampling_trials, root.child('noise-floor'),
                                      t=1, threads=threads))
        results.append(mc_noise_floor(lambda r: exact_rank(r, 64, 32, k), k, sampling_trials,
                                      root.child('noise-floor-exact'), t=1, threads=threads))

    if 'accumulation' in checks:
        policy = config.policy.to_policy()
        if not policy.enabled:
            policy = CompressionPolicy()
        results += _parallel_map(lambda i: _accumulation_instance(root, policy, i), range(instances), threads)

    failed = sum(1 for r in results if r.status == 'fail')
    skipped = sum(1 for r in results if r.status == 'skipped')
    logger.info(f"bound suite: {len(results)} checks, {failed} failed, {skipped} skipped")
    return results
