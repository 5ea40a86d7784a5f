"""
Unit tests for the toy Transformer, the storage strategies and training.
"""

import numpy as np
import pytest

from loract.autodiff import Tape, grad_compare
from loract.compress import CompressionPolicy, MemoryLedger
from loract.config import ModelConfig, RunConfig, TaskConfig
from loract.errors import ContractViolation, DomainError, TrainingDiverged
from loract.linalg import SeededRng, gaussian_matrix
from loract.transformer import (
    Adam,
    Binding,
    Sgd,
    SyntheticTask,
    build_model,
    compute_gradients,
    evaluate_loss,
    make_task,
    prenorm_backward,
    prenorm_forward,
    train_loop,
)

SMALL_MODEL = ModelConfig(depth=2, width=16, heads=2, ffn_hidden=32, lora_rank=4)
SEQ_LEN = 4


def small_config(**task):
    params = {'batch': 4, 'seq_len': SEQ_LEN, 'steps': 3, 'train_size': 8}
    params.update(task)
    return RunConfig(seed=3, model=SMALL_MODEL, task=TaskConfig(**params))


def perturbed_model(model_config=SMALL_MODEL, seed=0):
    """f64 model with nonzero adapter up-projections."""
    rng = SeededRng(seed)
    model = build_model(model_config, rng.child('model'), 'f64')
    for name in sorted(model.trainable):
        if name.endswith('.up'):
            model.params[name][...] = gaussian_matrix(rng.child(name), *model.params[name].shape) * 0.1
    return model


def batch_for(model, seed=1, sequences=4):
    X = gaussian_matrix(SeededRng(seed), sequences * SEQ_LEN, model.config.width)
    labels = np.arange(sequences) % model.config.n_classes
    return X, labels


class TestBuildModel:
    """Test cases for model construction."""

    def test_parameter_names(self):
        """Test frozen weights, adapters and norm scales are created per layer."""
        model = build_model(SMALL_MODEL, SeededRng(0))
        assert 'layers.1.attn.wq' in model.params
        assert 'layers.0.ffn.w_in.down' in model.trainable
        assert 'layers.0.attn.wk.down' not in model.params
        assert 'head.up' in model.trainable
        assert model.params['layers.0.attn.gamma'].shape == (1, 16)
        assert len(model.units()) == 4

    def test_frozen_weights_are_read_only(self):
        """Test frozen projections cannot be modified in place."""
        model = build_model(SMALL_MODEL, SeededRng(0))
        with pytest.raises(ValueError):
            model.params['layers.0.attn.wq'][0, 0] = 1.0

    def test_adapters_start_as_identity_delta(self):
        """Test a freshly built model predicts exactly like its base."""
        base_cfg = SMALL_MODEL.model_copy(update={'adapter_placement': []})
        adapted = build_model(SMALL_MODEL, SeededRng(5), 'f64')
        base = build_model(base_cfg, SeededRng(5), 'f64')
        X, _ = batch_for(adapted)
        assert np.array_equal(adapted.predict(X, SEQ_LEN), base.predict(X, SEQ_LEN))

    def test_memory_breakdown(self):
        """Test Adam state is twice the trainable bytes."""
        model = build_model(SMALL_MODEL, SeededRng(0))
        breakdown = model.memory_breakdown(Adam(1e-3))
        assert breakdown['grad_bytes'] == breakdown['trainable_bytes']
        assert breakdown['optimizer_bytes'] == 2 * breakdown['trainable_bytes']
        assert breakdown['param_bytes'] > breakdown['trainable_bytes']


class TestPreNormUnit:
    """Test cases for the stored-normalized-output forward and backward."""

    def test_forward_matches_plain_unit(self):
        """Test the storing forward returns the same Z as the plain unit."""
        model = perturbed_model()
        unit = model.units()[0]
        X, _ = batch_for(model)
        Z, _ = prenorm_forward(X, unit, CompressionPolicy(ratio='1/4'), SeededRng(2), seq_len=SEQ_LEN)
        tape = Tape(record=False)
        expected = unit.apply(Binding(tape, model), tape.constant(X), SEQ_LEN)
        assert np.array_equal(Z, expected.value)

    def test_ledger_entries(self):
        """Test only the normalized output and the RMS vector are recorded."""
        model = perturbed_model()
        unit = model.units()[1]
        X, _ = batch_for(model)
        ledger = MemoryLedger()
        prenorm_forward(X, unit, CompressionPolicy(ratio='1/4'), SeededRng(2), ledger, SEQ_LEN)
        labels = [e.label for e in ledger.entries]
        assert labels == ['layers.0.ffn.norm_out', 'layers.0.ffn.rms']
        assert ledger.entries[0].k == 4
        assert ledger.entries[0].stored_bytes == (16 + 16) * 4 * 8
        assert ledger.entries[1].stored_bytes == 16 * 8

    def test_backward_matches_tape(self):
        """Test the exact-policy backward equals differentiating the whole unit."""
        model = perturbed_model()
        X, _ = batch_for(model)
        gZ = gaussian_matrix(SeededRng(7), *X.shape)
        for unit in model.units()[:2]:
            _, stored = prenorm_forward(X, unit, CompressionPolicy.exact(), SeededRng(2), seq_len=SEQ_LEN)
            gX, param_grads = prenorm_backward(gZ, stored, unit)

            tape = Tape()
            binding = Binding(tape, model)
            x = tape.leaf(X, name='x')
            grads = tape.backward(unit.apply(binding, x, SEQ_LEN), seed=gZ)
            reference = binding.collect(grads)
            reference['x'] = grads.of(x)
            assert grad_compare({**param_grads, 'x': gX}, reference, mode='normwise').max_error <= 1e-10

    def test_backward_shape_mismatch(self):
        """Test an upstream gradient of the wrong shape is rejected."""
        model = perturbed_model()
        unit = model.units()[0]
        X, _ = batch_for(model)
        _, stored = prenorm_forward(X, unit, CompressionPolicy.exact(), SeededRng(2), seq_len=SEQ_LEN)
        with pytest.raises(ContractViolation):
            prenorm_backward(np.ones((2, 16)), stored, unit)

    def test_zero_gamma_is_domain_error(self):
        """Test a zero scale entry is refused before anything is stored."""
        model = build_model(SMALL_MODEL.model_copy(update={'train_gamma': True}), SeededRng(0), 'f64')
        unit = model.units()[0]
        model.params[unit.gamma_name][0, 3] = 0.0
        X, _ = batch_for(model)
        with pytest.raises(DomainError):
            prenorm_forward(X, unit, CompressionPolicy.exact(), SeededRng(2), seq_len=SEQ_LEN)

    def test_residual_path_is_exact_when_sublayer_vanishes(self):
        """Test Z = X and gX = gZ under compression when F is identically zero."""
        model = build_model(SMALL_MODEL, SeededRng(0), 'f64')
        for unit in model.units():
            out = f"{unit.prefix}.wo" if unit.kind == 'attn' else f"{unit.prefix}.w_out"
            model.params[out] = np.zeros_like(model.params[out])
        X = gaussian_matrix(SeededRng(1), 8 * SEQ_LEN, 16)
        gZ = gaussian_matrix(SeededRng(7), *X.shape)
        for unit in model.units():
            Z, stored = prenorm_forward(X, unit, CompressionPolicy(ratio='1/8'), SeededRng(2), seq_len=SEQ_LEN)
            assert stored.a_stored.factor is not None
            assert np.array_equal(Z, X)
            gX, _ = prenorm_backward(gZ, stored, unit)
            assert np.array_equal(gX, gZ)


class TestStrategies:
    """Test cases for the pre-norm, layer-wise and full-tape strategies."""

    def test_exact_strategies_agree(self):
        """Test every strategy gives the same gradients under the exact policy."""
        model = perturbed_model()
        X, labels = batch_for(model)
        exact = CompressionPolicy.exact()
        loss_full, reference, _ = compute_gradients(model, X, labels, SEQ_LEN, exact, SeededRng(0), 'full')
        for strategy in ('prenorm', 'layerwise'):
            loss, grads, _ = compute_gradients(model, X, labels, SEQ_LEN, exact, SeededRng(0), strategy)
            assert loss == pytest.approx(loss_full, rel=1e-12)
            assert grad_compare(grads, reference, mode='normwise').max_error <= 1e-8

    def test_policy_does_not_change_loss(self):
        """Test compression affects only the backward, never the loss."""
        model = perturbed_model()
        X, labels = batch_for(model)
        for strategy in ('prenorm', 'layerwise', 'full'):
            exact_loss, _, _ = compute_gradients(model, X, labels, SEQ_LEN, CompressionPolicy.exact(),
                                                 SeededRng(0), strategy)
            loss, _, _ = compute_gradients(model, X, labels, SEQ_LEN, CompressionPolicy(ratio='1/8'),
                                           SeededRng(0), strategy)
            assert loss == exact_loss

    def test_compressed_prenorm_stores_less(self):
        """Test the pre-norm ledger is below its exact byte count."""
        model = perturbed_model()
        X, labels = batch_for(model)
        _, grads, ledger = compute_gradients(model, X, labels, SEQ_LEN, CompressionPolicy(ratio='1/4'),
                                             SeededRng(0), 'prenorm')
        assert ledger.stored_total < ledger.exact_total
        assert set(grads) == model.trainable
        assert all(np.all(np.isfinite(g)) for g in grads.values())

    def test_ledger_fraction_at_one_eighth(self):
        """Test the default model keeps at most a quarter of the exact activation bytes at r = 1/8."""
        model = build_model(ModelConfig(), SeededRng(0), 'f64')
        X = gaussian_matrix(SeededRng(1), 8 * 8, model.config.width)
        labels = np.arange(8) % model.config.n_classes
        _, _, ledger = compute_gradients(model, X, labels, 8, CompressionPolicy(ratio='1/8'),
                                         SeededRng(0), 'prenorm')
        assert ledger.stored_total / ledger.exact_total <= 0.25

    def test_unknown_strategy(self):
        """Test an unknown strategy name is rejected."""
        model = perturbed_model()
        X, labels = batch_for(model)
        with pytest.raises(ContractViolation):
            compute_gradients(model, X, labels, SEQ_LEN, CompressionPolicy.exact(), SeededRng(0), 'other')


class TestOptimizers:
    """Test cases for SGD and Adam."""

    def test_sgd_momentum(self):
        """Test plain and heavy-ball updates."""
        params = {'w': np.ones((1, 2))}
        opt = Sgd(0.1, momentum=0.9)
        grads = {'w': np.full((1, 2), 0.5)}
        opt.step(params, grads)
        assert np.allclose(params['w'], 0.95)
        opt.step(params, grads)
        assert np.allclose(params['w'], 0.95 - 0.1 * 1.9 * 0.5)
        assert opt.state_bytes(params) == params['w'].nbytes
        assert Sgd(0.1).state_bytes(params) == 0

    def test_adam_first_step(self):
        """Test the bias-corrected first step moves each entry by about lr."""
        params = {'w': np.zeros((1, 3))}
        Adam(0.01).step(params, {'w': np.array([[2.0, -0.5, 1e-3]])})
        assert np.allclose(params['w'], [[-0.01, 0.01, -0.01]], rtol=1e-4)


class TestSyntheticTask:
    """Test cases for the synthetic labelled data set."""

    def test_cyclic_batches(self):
        """Test batches wrap around the data set."""
        task = SyntheticTask(np.arange(6.0).reshape(6, 1), np.array([0, 1, 2]), seq_len=2)
        X, labels = task.batch(1, 2)
        assert X[:, 0].tolist() == [4.0, 5.0, 0.0, 1.0]
        assert labels.tolist() == [2, 0]

    def test_labels_in_range_and_reproducible(self):
        """Test the labels are valid classes and seed-determined."""
        config = small_config()
        t1 = make_task(config.task, config.model, SeededRng(4))
        t2 = make_task(config.task, config.model, SeededRng(4))
        assert t1.inputs.shape == (8 * SEQ_LEN, 16)
        assert t1.labels.min() >= 0 and t1.labels.max() < SMALL_MODEL.n_classes
        assert np.array_equal(t1.inputs, t2.inputs)
        assert np.array_equal(t1.labels, t2.labels)

    def test_label_noise_redraws_labels(self):
        """Test noise only replaces labels and keeps the inputs."""
        config = small_config(train_size=200, label_noise=0.0)
        clean = make_task(config.task, config.model, SeededRng(4))
        noisy_cfg = config.task.model_copy(update={'label_noise': 0.5})
        noisy = make_task(noisy_cfg, config.model, SeededRng(4))
        assert np.array_equal(clean.inputs, noisy.inputs)
        changed = np.mean(clean.labels != noisy.labels)
        assert 0.2 < changed < 0.55
        assert noisy.labels.min() >= 0 and noisy.labels.max() < SMALL_MODEL.n_classes


class TestTrainLoop:
    """Test cases for the fine-tuning loop."""

    def test_short_run_is_reproducible(self):
        """Test identical configs give identical loss curves."""
        config = small_config()
        first = train_loop(config)
        second = train_loop(config)
        assert len(first.losses) == 3
        assert all(np.isfinite(first.losses))
        assert first.losses == second.losses
        assert first.curve_rows()[0]['step'] == 0

    def test_shadow_gradient_error(self):
        """Test the shadow backward reports zero deviation for the exact policy."""
        config = small_config(shadow=True, steps=2)
        result = train_loop(config, policy=CompressionPolicy.exact())
        assert result.grad_errors == [0.0, 0.0]
        compressed = train_loop(config, policy=CompressionPolicy(ratio='1/8'))
        assert all(err is not None and err >= 0.0 for err in compressed.grad_errors)

    def test_frozen_weights_unchanged_by_training(self):
        """Test only adapters move; every frozen tensor stays bit-identical."""
        config = small_config(steps=5)
        result = train_loop(config, policy=CompressionPolicy(ratio='1/4'))
        fresh = build_model(config.model, SeededRng(config.seed).child('model'), config.precision)
        for name in fresh.frozen_names():
            assert np.array_equal(result.model.params[name], fresh.params[name]), name
        assert any(not np.array_equal(result.model.params[name], fresh.params[name])
                   for name in fresh.trainable)

    def test_zero_steps_leaves_model_unchanged(self):
        """Test a run without steps returns the initial trainable parameters."""
        config = small_config(steps=0)
        result = train_loop(config)
        fresh = build_model(config.model, SeededRng(config.seed).child('model'), config.precision)
        assert result.losses == []
        for name in sorted(fresh.params):
            assert np.array_equal(result.model.params[name], fresh.params[name]), name
        assert np.isfinite(result.final_loss)

    def test_final_loss_covers_whole_task(self):
        """Test the reported final loss is the full-dataset cross-entropy."""
        config = small_config(steps=2)
        result = train_loop(config)
        task = make_task(config.task, config.model, SeededRng(config.seed).child('task'), config.precision)
        assert result.final_loss == evaluate_loss(result.model, task)

    def test_divergence_is_reported(self):
        """Test a non-finite loss stops training with TrainingDiverged."""
        config = small_config(optimizer='sgd', lr=1e30, steps=20)
        with np.errstate(all='ignore'), pytest.raises(TrainingDiverged):
            train_loop(config, policy=CompressionPolicy.exact())


class TestTrainingParity:
    """Test cases for full-length runs of the default task, exact against r = 1/2."""

    WINDOW = 50

    @classmethod
    def setup_class(cls):
        config = RunConfig(seed=0)
        cls.exact = train_loop(config, policy=CompressionPolicy.exact())
        cls.compressed = train_loop(config)

    def test_task_is_not_memorized(self):
        """Test label noise keeps the default task's loss well above zero."""
        assert self.exact.final_loss > 0.1

    def test_final_loss_parity(self):
        """Test r = 1/2 ends within 10% of the exact run after 300 steps."""
        assert len(self.compressed.losses) == 300
        gap = abs(self.compressed.final_loss - self.exact.final_loss) / self.exact.final_loss
        assert gap <= 0.1, (self.compressed.final_loss, self.exact.final_loss)

    def test_windowed_loss_decreases(self):
        """Test the mean loss of each 50-step window is below the previous one."""
        for result in (self.exact, self.compressed):
            losses = np.asarray(result.losses)
            means = losses.reshape(-1, self.WINDOW).mean(axis=1)
            assert np.all(np.diff(means) < 0.0), means


if __name__ == '__main__':
    pytest.main([__file__])
