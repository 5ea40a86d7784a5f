"""
Gradient check driver.

Runs the op-level finite-difference checks for every tape op, the
RMSNorm-from-output equivalence check, the model-level strategy
equivalence checks and a model-level finite-difference check. Used by
`loract gradcheck` and by the tests.
"""

import math
from contextlib import nullcontext
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .autodiff import Tape, finite_diff_grad, grad_compare, mutated_norm_backward, norm_backward, rms_of
from .compress import CompressionPolicy
from .decompose import DecomposeMethod
from .linalg import SeededRng, gaussian_matrix
from .logger import get_logger
from .transformer import build_model, compute_gradients

logger = get_logger()

FD_STEP = 1e-5
FD_TOL = 1e-4
NORM_TOL = 1e-8
STRATEGY_TOL = 1e-8
LOSSLESS_TOL = 1e-6


@dataclass(frozen=True)
class GradcheckRecord:
    check: str
    key: str
    max_rel_err: float
    tol: Optional[float]
    passed: bool

    def to_record(self):
        return asdict(self)


def _record(check, key, err, tol):
    passed = bool(math.isfinite(err) and (tol is None or err <= tol))
    return GradcheckRecord(check, key, float(err), tol, passed)


def _scalar(tape, out, target):
    return out if out.shape == (1, 1) else tape.mse(out, target)


def _op_cases(rng):
    """(name, inputs, build) for every differentiable tape op."""
    g = lambda label, m, n, scale=1.0: gaussian_matrix(rng.child(label), m, n) * scale
    W = g('W', 5, 4, 0.5)
    W_attn = g('W_attn', 8, 8, 0.5)
    labels = np.array([0, 2, 1, 2, 0, 1])
    return [
        ('matmul', {'a': g('a', 6, 5), 'b': g('b', 5, 4)}, lambda t, x: t.matmul(x['a'], x['b'])),
        ('add', {'a': g('a', 6, 5), 'b': g('b', 6, 5)}, lambda t, x: t.add(x['a'], x['b'])),
        ('scale', {'a': g('a', 6, 5)}, lambda t, x: t.scale(x['a'], -1.5)),
        ('linear_frozen', {'x': g('x', 6, 5)}, lambda t, x: t.linear_frozen(x['x'], W)),
        ('lora_linear', {'x': g('x', 6, 5), 'down': g('down', 5, 2), 'up': g('up', 2, 4)},
         lambda t, x: t.lora_linear(x['x'], W, x['down'], x['up'], 0.7)),
        ('rmsnorm[output]', {'x': g('x', 6, 5), 'gamma': 1.0 + g('gamma', 1, 5, 0.3)},
         lambda t, x: t.rmsnorm(x['x'], x['gamma'], 1e-6, save='output')),
        ('rmsnorm[input]', {'x': g('x', 6, 5), 'gamma': 1.0 + g('gamma', 1, 5, 0.3)},
         lambda t, x: t.rmsnorm(x['x'], x['gamma'], 1e-6, save='input')),
        ('softmax_rows', {'x': g('x', 6, 5)}, lambda t, x: t.softmax_rows(x['x'])),
        ('silu', {'x': g('x', 6, 5)}, lambda t, x: t.silu(x['x'])),
        ('gelu', {'x': g('x', 6, 5)}, lambda t, x: t.gelu(x['x'])),
        ('attention', {'q': g('q', 6, 8), 'k': g('k', 6, 8), 'v': g('v', 6, 8)},
         lambda t, x: t.attention(x['q'], x['k'], x['v'], 2, 3, False)),
        ('attention[causal]', {'q': g('q', 6, 8), 'k': g('k', 6, 8), 'v': g('v', 6, 8)},
         lambda t, x: t.linear_frozen(t.attention(x['q'], x['k'], x['v'], 2, 3, True), W_attn)),
        ('mean_pool', {'x': g('x', 6, 5)}, lambda t, x: t.mean_pool(x['x'], 3)),
        ('cross_entropy', {'logits': g('logits', 6, 3)}, lambda t, x: t.cross_entropy(x['logits'], labels)),
        ('mse', {'x': g('x', 6, 5)}, lambda t, x: t.mse(x['x'], np.zeros((6, 5)))),
    ]


def check_op(name, inputs, build, target_rng, policy=None, h=FD_STEP):
    """
    Compare tape gradients of one op against central differences.

    Non-scalar outputs are reduced with an MSE against a fixed random target.

    Returns:
        list: GradcheckRecord per input
    """
    shape_tape = Tape(record=False)
    sample = build(shape_tape, {k: shape_tape.constant(v) for k, v in inputs.items()})
    target = gaussian_matrix(target_rng, *sample.shape) if sample.shape != (1, 1) else None

    def loss_of(values):
        tape = Tape(record=False)
        out = build(tape, {k: tape.constant(v) for k, v in values.items()})
        return float(_scalar(tape, out, target).value[0, 0])

    tape = Tape(policy)
    leaves = {k: tape.leaf(v, requires_grad=True, name=k) for k, v in inputs.items()}
    grads = tape.backward(_scalar(tape, build(tape, leaves), target))

    records = []
    for key, value in inputs.items():
        numeric = finite_diff_grad(lambda x: loss_of({**inputs, key: x}), value, h)
        analytic = grads.get(leaves[key].node_id, np.zeros_like(value))
        err = grad_compare({key: analytic}, {key: numeric}, mode='normwise').max_error
        records.append(_record('op_fd', f"{name}.{key}", err, FD_TOL))
    return records


def check_norm_from_output(rng, instances=100, eps=0.0):
    """
    RMSNorm input gradient recovered from (A, gamma, rms) against the
    conventional backward through the input.
    """
    worst = 0.0
    for i in range(instances):
        r = rng.child(f"norm-{i}")
        m, n = 4 + i % 5, 3 + i % 7
        X = gaussian_matrix(r.child('x'), m, n)
        gamma = 1.0 + 0.5 * gaussian_matrix(r.child('gamma'), 1, n)
        G = gaussian_matrix(r.child('g'), m, n)
        tape = Tape()
        x = tape.leaf(X, name='x')
        a = tape.rmsnorm(x, tape.constant(gamma), eps, save='input')
        reference = tape.backward(a, seed=G).of(x)
        recovered, _ = norm_backward(G, a.value, gamma, rms_of(X, eps))
        worst = max(worst, grad_compare({'x': recovered}, {'x': reference}, mode='normwise').max_error)
    tol = NORM_TOL if eps == 0.0 else 1e-5
    return _record('norm_from_output', f"eps={eps:g}", worst, tol)


def _perturbed_model(config, rng, model_config=None):
    """Model in f64 with nonzero adapters so every gradient is informative."""
    model = build_model(model_config or config.model, rng.child('model'), 'f64')
    for name in sorted(model.trainable):
        if name.endswith('.up'):
            model.params[name][...] = gaussian_matrix(rng.child(name), *model.params[name].shape) * 0.1
    return model


def _batch(config, model, rng):
    task = config.task
    m = task.batch * task.seq_len
    X = gaussian_matrix(rng.child('x'), m, model.config.width)
    labels = np.array(rng.child('labels').indices_without_replacement(m, task.batch)) % model.config.n_classes
    return X, labels


def check_strategies(config, rng, policy=None):
    """
    Exact-policy pre-norm and layer-wise gradients against the full tape,
    the lossless policy against exact, and the configured policy's
    deviation (reported, not asserted).
    """
    model = _perturbed_model(config, rng)
    X, labels = _batch(config, model, rng)
    seq_len = config.task.seq_len
    exact = CompressionPolicy.exact()
    _, reference, _ = compute_gradients(model, X, labels, seq_len, exact, rng.child('full'), 'full')

    records = []
    for strategy in ('prenorm', 'layerwise'):
        _, grads, _ = compute_gradients(model, X, labels, seq_len, exact, rng.child(strategy), strategy)
        err = grad_compare(grads, reference, mode='normwise').max_error
        records.append(_record('strategy_exact', strategy, err, STRATEGY_TOL))

    lossless = CompressionPolicy(ratio=Fraction(1), method=DecomposeMethod.truncated_svd())
    _, grads, _ = compute_gradients(model, X, labels, seq_len, lossless, rng.child('lossless'), 'prenorm')
    records.append(_record('lossless', 'prenorm', grad_compare(grads, reference, mode='normwise').max_error,
                           LOSSLESS_TOL))

    policy = policy or config.policy.to_policy()
    for strategy in ('prenorm', 'layerwise'):
        _, grads, _ = compute_gradients(model, X, labels, seq_len, policy, rng.child(f"policy-{strategy}"), strategy)
        err = grad_compare(grads, reference, mode='normwise').max_error
        records.append(_record('policy_deviation', f"{strategy}:{policy.describe()}", err, None))
    return records


def strategy_deviation(config, policy, rng, strategies=('prenorm', 'layerwise')):
    """
    Normwise gradient error of each storage strategy under `policy`,
    measured against the exact full tape on one random model and batch.

    Returns:
        dict: strategy -> max relative error over trainable tensors
    """
    model = _perturbed_model(config, rng)
    X, labels = _batch(config, model, rng)
    seq_len = config.task.seq_len
    _, reference, _ = compute_gradients(model, X, labels, seq_len, CompressionPolicy.exact(), rng.child('full'), 'full')
    errors = {}
    for strategy in strategies:
        _, grads, _ = compute_gradients(model, X, labels, seq_len, policy, rng.child(f"policy-{strategy}"), strategy)
        errors[strategy] = grad_compare(grads, reference, mode='normwise').max_error
    return errors


def check_model_fd(config, rng):
    """Finite differences through a small pre-norm model, every trainable tensor."""
    small = config.model.model_copy(update={
        'depth': 1, 'width': 8, 'heads': 2, 'ffn_hidden': 12, 'lora_rank': 2, 'train_gamma': True,
    })
    model = _perturbed_model(config, rng.child('fd'), small)
    task = config.task.model_copy(update={'batch': 2, 'seq_len': 3})
    m = task.batch * task.seq_len
    X = gaussian_matrix(rng.child('fd-x'), m, small.width)
    labels = np.arange(task.batch) % small.n_classes
    exact = CompressionPolicy.exact()
    _, grads, _ = compute_gradients(model, X, labels, task.seq_len, exact, rng, 'prenorm')

    records = []
    for name in sorted(model.trainable):
        param = model.params[name]
        original = param.copy()

        def loss_at(value):
            param[...] = value
            loss, _, _ = compute_gradients(model, X, labels, task.seq_len, exact, rng, 'prenorm')
            return loss

        numeric = finite_diff_grad(loss_at, original, FD_STEP)
        param[...] = original
        err = grad_compare({name: grads[name]}, {name: numeric}, mode='normwise').max_error
        records.append(_record('model_fd', name, err, FD_TOL))
    return records


def run_gradcheck(config, policy=None, mutate=False, instances=100):
    """
    Run every gradient oracle.

    Args:
        config (RunConfig): Seed, model and task sizes
        policy (CompressionPolicy): Policy whose deviation is reported
        mutate (bool): Corrupt the RMSNorm-from-output backward (self-test)
        instances (int): Random instances for the norm equivalence check

    Returns:
        list: GradcheckRecord
    """
    root = SeededRng(config.seed).child('gradcheck')
    records = []
    with mutated_norm_backward() if mutate else nullcontext():
        for name, inputs, build in _op_cases(root.child('ops')):
            records += check_op(name, inputs, build, root.child(f"target-{name}"))
        records.append(check_norm_from_output(root.child('norm'), instances, 0.0))
        records.append(check_norm_from_output(root.child('norm-eps'), instances, 1e-6))
        records += check_strategies(config, root.child('strategies'), policy)
        records += check_model_fd(config, root.child('model-fd'))
    failed = [r for r in records if not r.passed]
    for r in failed:
        logger.error(f"gradcheck failed: {r.check} {r.key} err={r.max_rel_err:.3e} tol={r.tol}")
    logger.info(f"gradcheck: {len(records) - len(failed)}/{len(records)} passed")
    return records
