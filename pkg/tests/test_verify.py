"""
Unit tests for the gradient check driver.
"""

import pytest

from loract.autodiff import mutated_norm_backward
from loract.compress import CompressionPolicy
from loract.config import ModelConfig, RunConfig, TaskConfig
from loract.linalg import SeededRng
from loract.verify import (
    FD_TOL,
    GradcheckRecord,
    _op_cases,
    check_model_fd,
    check_norm_from_output,
    check_op,
    check_strategies,
    run_gradcheck,
    strategy_deviation,
)

SMALL = RunConfig(
    seed=5,
    model=ModelConfig(depth=1, width=16, heads=2, ffn_hidden=16, lora_rank=2),
    task=TaskConfig(batch=2, seq_len=8),
)


class TestOpChecks:
    """Test cases for per-op finite-difference checks."""

    def test_every_op_passes(self):
        """Test tape gradients of every op agree with central differences."""
        rng = SeededRng(0)
        names = []
        for name, inputs, build in _op_cases(rng.child('ops')):
            records = check_op(name, inputs, build, rng.child(name))
            assert len(records) == len(inputs)
            for record in records:
                assert record.passed, record
                assert record.tol == FD_TOL
            names.append(name)
        assert {'rmsnorm[output]', 'rmsnorm[input]', 'attention[causal]', 'lora_linear'} <= set(names)

    def test_mutation_is_caught_at_op_level(self):
        """Test the corrupted RMSNorm backward fails its op check."""
        rng = SeededRng(0)
        cases = {name: (inputs, build) for name, inputs, build in _op_cases(rng.child('ops'))}
        inputs, build = cases['rmsnorm[output]']
        with mutated_norm_backward():
            records = check_op('rmsnorm[output]', inputs, build, rng.child('target'))
        assert not all(r.passed for r in records)

    def test_record_fields(self):
        """Test flat records for reports."""
        record = GradcheckRecord('op_fd', 'matmul.a', 1e-9, 1e-4, True)
        assert record.to_record() == {'check': 'op_fd', 'key': 'matmul.a', 'max_rel_err': 1e-9,
                                      'tol': 1e-4, 'passed': True}


class TestNormFromOutput:
    """Test cases for the RMSNorm equivalence check."""

    def test_passes_with_and_without_eps(self):
        """Test both stabilizer settings."""
        assert check_norm_from_output(SeededRng(1), 30, 0.0).passed
        assert check_norm_from_output(SeededRng(1), 30, 1e-6).passed

    def test_fails_under_mutation(self):
        """Test a sign flip in the correction term is detected."""
        with mutated_norm_backward():
            record = check_norm_from_output(SeededRng(1), 10, 0.0)
        assert not record.passed


class TestModelChecks:
    """Test cases for strategy equivalence and model finite differences."""

    def test_strategies(self):
        """Test exact strategies agree and the configured deviation is reported."""
        records = check_strategies(SMALL, SeededRng(2))
        by_check = {}
        for record in records:
            by_check.setdefault(record.check, []).append(record)
        assert all(r.passed for r in by_check['strategy_exact'])
        assert by_check['lossless'][0].passed
        assert all(r.tol is None for r in by_check['policy_deviation'])

    def test_model_finite_differences(self):
        """Test every trainable tensor of a small model, norm scales included."""
        records = check_model_fd(SMALL, SeededRng(3))
        keys = [r.key for r in records]
        assert 'layers.0.attn.gamma' in keys
        assert all(r.passed for r in records)

    def test_mutated_run_fails(self):
        """Test the whole harness reports failures when the backward is corrupted."""
        records = run_gradcheck(SMALL, mutate=True, instances=10)
        failed = {(r.check, r.key) for r in records if not r.passed}
        assert ('strategy_exact', 'prenorm') in failed
        assert ('strategy_exact', 'layerwise') not in failed


class TestStrategyDeviation:
    """Test cases for gradient error under compression, averaged over seeds."""

    RATIOS = ('1/2', '1/4', '1/8')
    SEEDS = range(50)

    @classmethod
    def setup_class(cls):
        cls.mean_errors = {}
        for ratio in cls.RATIOS:
            totals = {'prenorm': 0.0, 'layerwise': 0.0}
            for seed in cls.SEEDS:
                config = RunConfig(seed=seed)
                policy = config.policy.model_copy(update={'ratio': ratio}).to_policy()
                errors = strategy_deviation(config, policy, SeededRng(seed).child('strategies'))
                for strategy, err in errors.items():
                    totals[strategy] += err
            cls.mean_errors[ratio] = {s: total / len(cls.SEEDS) for s, total in totals.items()}

    def test_prenorm_not_worse_than_layerwise(self):
        """Test storing normalized outputs costs no more accuracy than storing layer inputs."""
        for ratio in self.RATIOS:
            means = self.mean_errors[ratio]
            assert means['prenorm'] <= means['layerwise'], (ratio, means)

    def test_error_grows_as_ratio_shrinks(self):
        """Test a larger kept rank gives a smaller mean gradient error."""
        assert self.mean_errors['1/2']['prenorm'] <= self.mean_errors['1/8']['prenorm']
        assert self.mean_errors['1/2']['layerwise'] <= self.mean_errors['1/8']['layerwise']

    def test_exact_policy_has_no_deviation(self):
        """Test the exact policy reproduces the full-tape gradients."""
        errors = strategy_deviation(SMALL, CompressionPolicy.exact(), SeededRng(1))
        assert errors['prenorm'] <= 1e-8
        assert errors['layerwise'] <= 1e-8


if __name__ == '__main__':
    pytest.main([__file__])
