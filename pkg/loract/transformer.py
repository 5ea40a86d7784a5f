"""
Toy pre-norm Transformer with LoRA adapters and three activation-storage
strategies:

- prenorm: each unit Z = F(Norm(X)) + X keeps only A = Norm(X) (under the
  compression policy) and the RMS vector. Backward reconstructs A, recomputes
  F on a fresh sub-tape and recovers the input gradient from A, gamma and RMS.
- layerwise: each layer keeps its (compressed) input X and recomputes the
  whole layer in backward.
- full: one tape over the whole model; every op keeps what it needs.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .autodiff import Tape, grad_compare, norm_backward, rms_of
from .compress import (
    CompressionPolicy,
    MemoryLedger,
    StoredActivation,
    compress_activation,
    retrieve_activation,
)
from .config import ModelConfig
from .errors import ContractViolation, DomainError, TrainingDiverged
from .linalg import SeededRng, as_matrix, gaussian_matrix, resolve_dtype
from .logger import get_logger

logger = get_logger()

STRATEGIES = ('prenorm', 'layerwise', 'full')


@dataclass
class LoraAdapter:
    """Trainable low-rank delta alpha * down @ up on a frozen projection."""

    down: np.ndarray
    up: np.ndarray
    alpha: float

    @property
    def rank(self):
        return self.down.shape[1]

    @classmethod
    def init(cls, rng, d_in, d_out, rank, alpha, dtype):
        down = gaussian_matrix(rng, d_in, rank, dtype=dtype) / math.sqrt(d_in)
        return cls(down=down, up=np.zeros((rank, d_out), dtype=dtype), alpha=alpha)


class Binding:
    """
    Exposes model parameters on one tape.

    Trainable parameters become gradient-receiving leaves (created once per
    tape); frozen weights stay plain arrays.
    """

    def __init__(self, tape, model):
        self.tape = tape
        self.model = model
        self.leaves = {}

    def tensor(self, name):
        if name not in self.leaves:
            value = self.model.params[name]
            if self.tape.record and name in self.model.trainable:
                self.leaves[name] = self.tape.leaf(value, requires_grad=True, name=name)
            else:
                self.leaves[name] = self.tape.constant(value, name=name)
        return self.leaves[name]

    def project(self, x, name):
        """x W, plus the LoRA delta when the projection carries an adapter."""
        W = self.model.params[name]
        if f"{name}.down" in self.model.params:
            return self.tape.lora_linear(x, W, self.tensor(f"{name}.down"), self.tensor(f"{name}.up"),
                                         self.model.adapter_alpha[name])
        return self.tape.linear_frozen(x, W)

    def collect(self, grads):
        """Gradients of the trainable parameters reached on this tape."""
        return {name: grads[t.node_id] for name, t in self.leaves.items()
                if t.requires_grad and t.node_id in grads}


@dataclass
class PreNormUnit:
    """Z = F(Norm(X)) + X with F an attention or feed-forward sub-layer."""

    prefix: str
    kind: str
    model: 'ToyTransformer' = field(repr=False, compare=False)

    @property
    def gamma_name(self):
        return f"{self.prefix}.gamma"

    @property
    def gamma(self):
        return self.model.params[self.gamma_name]

    @property
    def eps(self):
        return self.model.config.eps

    def sublayer(self, binding, a, seq_len):
        """Evaluate F on the tape behind `binding`."""
        tape = binding.tape
        cfg = self.model.config
        if self.kind == 'attn':
            q = binding.project(a, f"{self.prefix}.wq")
            k = binding.project(a, f"{self.prefix}.wk")
            v = binding.project(a, f"{self.prefix}.wv")
            o = tape.attention(q, k, v, cfg.heads, seq_len, cfg.causal)
            return binding.project(o, f"{self.prefix}.wo")
        h = binding.project(a, f"{self.prefix}.w_in")
        return binding.project(tape.activation(h, cfg.activation), f"{self.prefix}.w_out")

    def apply(self, binding, x, seq_len, norm_save='input'):
        """Whole unit on a tape, with the conventional RMSNorm node."""
        a = binding.tape.rmsnorm(x, binding.tensor(self.gamma_name), self.eps, save=norm_save)
        return binding.tape.add(self.sublayer(binding, a, seq_len), x)


@dataclass
class TransformerLayer:
    attn: PreNormUnit
    ffn: PreNormUnit

    @property
    def units(self):
        return (self.attn, self.ffn)


@dataclass
class ToyTransformer:
    """
    Frozen random base model with LoRA adapters and a linear classifier
    over mean-pooled token states.
    """

    config: ModelConfig
    params: Dict[str, np.ndarray]
    trainable: set
    adapter_alpha: Dict[str, float]
    layers: List[TransformerLayer] = field(default_factory=list)

    def units(self):
        return [unit for layer in self.layers for unit in layer.units]

    @property
    def dtype(self):
        return self.params['head'].dtype

    def frozen_names(self):
        return sorted(set(self.params) - self.trainable)

    def trainable_params(self):
        return {name: self.params[name] for name in sorted(self.trainable)}

    def head_loss(self, binding, x, labels, seq_len):
        pooled = binding.tape.mean_pool(x, seq_len)
        logits = binding.project(pooled, 'head')
        return binding.tape.cross_entropy(logits, labels)

    def predict(self, X, seq_len):
        """Logits without recording anything."""
        tape = Tape(record=False)
        binding = Binding(tape, self)
        x = tape.constant(X)
        for unit in self.units():
            x = unit.apply(binding, x, seq_len)
        return binding.project(tape.mean_pool(x, seq_len), 'head').value

    def memory_breakdown(self, optimizer=None):
        """Parameter, gradient and optimizer-state bytes."""
        total = sum(p.nbytes for p in self.params.values())
        trainable = sum(self.params[name].nbytes for name in self.trainable)
        return {
            'param_bytes': total,
            'trainable_bytes': trainable,
            'grad_bytes': trainable,
            'optimizer_bytes': optimizer.state_bytes(self.trainable_params()) if optimizer else 0,
        }


def build_model(config, rng, precision='f32'):
    """
    Build a toy model from a ModelConfig.

    Frozen weights are N(0, 1/d_in) and read-only; adapters start with a
    zero up-projection so the model initially equals its base.

    Args:
        config (ModelConfig): Architecture
        rng (SeededRng): Initialization stream
        precision (str): 'f32' or 'f64'

    Returns:
        ToyTransformer
    """
    dtype = resolve_dtype(precision)
    d = config.width
    params = {}
    trainable = set()
    alpha = {}

    def frozen(name, d_in, d_out, site):
        W = gaussian_matrix(rng.child(name), d_in, d_out, dtype=dtype) / math.sqrt(d_in)
        W.flags.writeable = False
        params[name] = W
        if site in config.adapter_placement:
            adapter = LoraAdapter.init(rng.child(f"{name}.adapter"), d_in, d_out,
                                       config.lora_rank, config.lora_alpha, dtype)
            params[f"{name}.down"] = adapter.down
            params[f"{name}.up"] = adapter.up
            trainable.update((f"{name}.down", f"{name}.up"))
            alpha[name] = adapter.alpha

    model = ToyTransformer(config=config, params=params, trainable=trainable, adapter_alpha=alpha)
    for i in range(config.depth):
        attn = PreNormUnit(f"layers.{i}.attn", 'attn', model)
        ffn = PreNormUnit(f"layers.{i}.ffn", 'ffn', model)
        for site in ('wq', 'wk', 'wv', 'wo'):
            frozen(f"{attn.prefix}.{site}", d, d, site)
        frozen(f"{ffn.prefix}.w_in", d, config.ffn_hidden, 'w_in')
        frozen(f"{ffn.prefix}.w_out", config.ffn_hidden, d, 'w_out')
        for unit in (attn, ffn):
            gamma = np.ones((1, d), dtype=dtype)
            if config.train_gamma:
                trainable.add(unit.gamma_name)
            else:
                gamma.flags.writeable = False
            params[unit.gamma_name] = gamma
        model.layers.append(TransformerLayer(attn, ffn))
    frozen('head', d, config.n_classes, 'head')
    logger.debug(f"built model depth={config.depth} width={d} trainable={len(trainable)} tensors")
    return model


# -- pre-norm compression ---------------------------------------------------

@dataclass(frozen=True)
class StoredPreNorm:
    """What a pre-norm unit keeps for backward."""

    a_stored: StoredActivation
    rms: np.ndarray
    seq_len: int


def prenorm_forward(X, unit, policy, rng, ledger=None, seq_len=1):
    """
    Forward through Z = F(Norm(X)) + X keeping only Norm(X) and RMS.

    F runs without recording; its internals are recomputed in backward.

    Args:
        X (np.ndarray): m x n input
        unit (PreNormUnit): The unit
        policy (CompressionPolicy): Storage policy for A = Norm(X)
        rng (SeededRng): Stream for the decomposition
        ledger (MemoryLedger): Receives the stored A and RMS vector
        seq_len (int): Sequence length (attention grouping)

    Returns:
        tuple: (Z, StoredPreNorm)
    """
    X = as_matrix(X, f"{unit.prefix}.input")
    gamma = unit.gamma
    if np.any(gamma == 0.0):
        raise DomainError(f"{unit.gamma_name} has a zero entry")
    rms = rms_of(X, unit.eps)
    A = X / rms[:, None] * gamma
    tape = Tape(record=False)
    Z = unit.sublayer(Binding(tape, unit.model), tape.constant(A), seq_len).value + X

    label = f"{unit.prefix}.norm_out"
    a_stored = compress_activation(A, policy, rng.child(label), label)
    if ledger is not None:
        ledger.record(label, a_stored)
        ledger.record_vector(f"{unit.prefix}.rms", rms)
    return Z, StoredPreNorm(a_stored, rms, seq_len)


def prenorm_backward(gZ, stored, unit):
    """
    Backward through a pre-norm unit from its stored normalized output.

    A~ is reconstructed, F is recomputed from A~ on a sub-tape to get
    grad_A and the adapter gradients, and the input gradient is recovered as
    (g_bar - x_bar * mean_j(g_bar * x_bar)) / rms + gZ with x_bar = A~ / gamma
    and g_bar = grad_A * gamma.

    Args:
        gZ (np.ndarray): Upstream gradient, m x n
        stored (StoredPreNorm): From the matching prenorm_forward
        unit (PreNormUnit): The unit

    Returns:
        tuple: (gX, dict of parameter gradients)
    """
    if gZ.shape != stored.a_stored.shape:
        raise ContractViolation(f"gradient shape {gZ.shape} does not match stored {stored.a_stored.shape}")
    a_tilde = retrieve_activation(stored.a_stored)
    tape = Tape(label=f"{unit.prefix}.recompute")
    binding = Binding(tape, unit.model)
    a = tape.leaf(a_tilde, requires_grad=True, name='norm_out')
    out = unit.sublayer(binding, a, stored.seq_len)
    grads = tape.backward(out, seed=gZ)

    g_norm, g_gamma = norm_backward(grads.of(a), a_tilde, unit.gamma, stored.rms)
    param_grads = binding.collect(grads)
    if unit.gamma_name in unit.model.trainable:
        param_grads[unit.gamma_name] = g_gamma
    return g_norm + gZ, param_grads


# -- layer-wise baseline ----------------------------------------------------

@dataclass(frozen=True)
class StoredLayer:
    x_stored: StoredActivation
    seq_len: int


def layerwise_forward(X, layer, policy, rng, ledger=None, seq_len=1):
    """Forward through a whole layer keeping only its (compressed) input."""
    X = as_matrix(X, f"{layer.attn.prefix}.layer_input")
    tape = Tape(record=False)
    binding = Binding(tape, layer.attn.model)
    x = tape.constant(X)
    for unit in layer.units:
        x = unit.apply(binding, x, seq_len)

    label = f"{layer.attn.prefix.rsplit('.', 1)[0]}.input"
    x_stored = compress_activation(X, policy, rng.child(label), label)
    if ledger is not None:
        ledger.record(label, x_stored)
    return x.value, StoredLayer(x_stored, seq_len)


def layerwise_backward(gZ, stored, layer):
    """Reconstruct the layer input and recompute norm + F + residual for both units."""
    x_tilde = retrieve_activation(stored.x_stored)
    tape = Tape(label='layer.recompute')
    binding = Binding(tape, layer.attn.model)
    x0 = tape.leaf(x_tilde, requires_grad=True, name='layer_input')
    x = x0
    for unit in layer.units:
        x = unit.apply(binding, x, stored.seq_len)
    grads = tape.backward(x, seed=gZ)
    return grads.of(x0), binding.collect(grads)


# -- gradients, optimizers, training ------------------------------------------

def _accumulate(total, part):
    for name, g in part.items():
        total[name] = total[name] + g if name in total else g


def compute_gradients(model, X, labels, seq_len, policy, rng, strategy='prenorm'):
    """
    Loss and trainable-parameter gradients for one batch.

    Args:
        model (ToyTransformer): Model
        X (np.ndarray): (B*T) x n token states
        labels (np.ndarray): B class labels
        seq_len (int): T
        policy (CompressionPolicy): Storage policy for saved activations
        rng (SeededRng): Stream for the decompositions
        strategy (str): 'prenorm', 'layerwise' or 'full'

    Returns:
        tuple: (loss, gradient dict, MemoryLedger)
    """
    if strategy not in STRATEGIES:
        raise ContractViolation(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    X = np.asarray(X, dtype=model.dtype)
    ledger = MemoryLedger()
    grads = {}

    if strategy == 'full':
        tape = Tape(policy, rng.child('full'), ledger, label='full')
        binding = Binding(tape, model)
        x = tape.constant(X)
        for unit in model.units():
            x = unit.apply(binding, x, seq_len)
        loss = model.head_loss(binding, x, labels, seq_len)
        grads = binding.collect(tape.backward(loss))
    else:
        x = X
        stored = []
        blocks = model.units() if strategy == 'prenorm' else model.layers
        for block in blocks:
            if strategy == 'prenorm':
                x, s = prenorm_forward(x, block, policy, rng, ledger, seq_len)
            else:
                x, s = layerwise_forward(x, block, policy, rng, ledger, seq_len)
            stored.append(s)

        tape = Tape(policy, rng.child('head'), ledger, label='head')
        binding = Binding(tape, model)
        x_final = tape.leaf(x, requires_grad=True, name='final')
        loss = model.head_loss(binding, x_final, labels, seq_len)
        head_grads = tape.backward(loss)
        _accumulate(grads, binding.collect(head_grads))
        g = head_grads.of(x_final)
        for block, s in zip(reversed(blocks), reversed(stored)):
            if strategy == 'prenorm':
                g, part = prenorm_backward(g, s, block)
            else:
                g, part = layerwise_backward(g, s, block)
            _accumulate(grads, part)

    for name in model.trainable:
        if name not in grads:
            grads[name] = np.zeros_like(model.params[name])
    return float(loss.value[0, 0]), grads, ledger


class Sgd:
    """Plain SGD with optional heavy-ball momentum."""

    def __init__(self, lr, momentum=0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, params, grads):
        for name in sorted(grads):
            g = grads[name]
            if self.momentum:
                v = self.momentum * self.velocity.get(name, 0.0) + g
                self.velocity[name] = v
                g = v
            params[name] -= (self.lr * g).astype(params[name].dtype, copy=False)

    def state_bytes(self, params):
        return sum(p.nbytes for p in params.values()) if self.momentum else 0


class Adam:
    """Adam with bias correction."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.beta1 * self.m.get(name, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1.0 - self.beta2) * g * g
            self.m[name] = m
            self.v[name] = v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[name] -= update.astype(params[name].dtype, copy=False)

    def state_bytes(self, params):
        return 2 * sum(p.nbytes for p in params.values())


def build_optimizer(task):
    if task.optimizer == 'adam':
        return Adam(task.lr)
    return Sgd(task.lr, task.momentum)


@dataclass
class SyntheticTask:
    """
    Sequence classification with labels from a frozen random network.

    Token states are low-rank codes plus small noise; a separate random
    frozen labeler of configurable depth assigns each sequence the argmax
    of its logits. A configured fraction of labels is then redrawn
    uniformly.
    """

    inputs: np.ndarray
    labels: np.ndarray
    seq_len: int

    @property
    def size(self):
        return self.labels.shape[0]

    def batch(self, step, batch_size):
        """Deterministic cyclic mini-batch for a step."""
        start = (step * batch_size) % self.size
        picks = [(start + i) % self.size for i in range(batch_size)]
        T = self.seq_len
        rows = np.concatenate([np.arange(p * T, (p + 1) * T) for p in picks])
        return self.inputs[rows], self.labels[picks]


def make_task(task, model_config, rng, precision='f32'):
    """Generate the synthetic data set and its labels."""
    dtype = resolve_dtype(precision)
    d = model_config.width
    rows = task.train_size * task.seq_len
    basis = gaussian_matrix(rng.child('basis'), task.input_rank, d) / math.sqrt(task.input_rank)
    codes = gaussian_matrix(rng.child('codes'), rows, task.input_rank)
    noise = gaussian_matrix(rng.child('noise'), rows, d) * task.input_noise
    inputs = (codes @ basis + noise).astype(dtype)

    labeler_cfg = model_config.model_copy(update={'depth': task.labeler_depth, 'adapter_placement': []})
    labeler = build_model(labeler_cfg, rng.child('labeler'), 'f64')
    labels = np.argmax(labeler.predict(inputs.astype(np.float64), task.seq_len), axis=1)
    if task.label_noise > 0.0:
        noise_rng = rng.child('label-noise')
        flip = noise_rng.uniform(labels.shape[0]) < task.label_noise
        redrawn = np.floor(noise_rng.uniform(labels.shape[0]) * model_config.n_classes).astype(np.int64)
        labels = np.where(flip, redrawn, labels)
    return SyntheticTask(inputs=inputs, labels=labels.astype(np.int64), seq_len=task.seq_len)


def evaluate_loss(model, task):
    """Mean cross-entropy of the model over the whole task, nothing recorded."""
    tape = Tape(record=False)
    logits = model.predict(task.inputs, task.seq_len)
    return float(tape.cross_entropy(tape.constant(logits), task.labels).value[0, 0])


@dataclass
class StepResult:
    loss: float
    ledger: MemoryLedger
    grad_err: Optional[float] = None


def train_step(model, batch, policy, optimizer, rng, seq_len, strategy='prenorm', shadow=False):
    """
    One optimization step.

    Args:
        model (ToyTransformer): Updated in place (trainable parameters only)
        batch (tuple): (X, labels)
        policy (CompressionPolicy): Storage policy
        optimizer (Adam | Sgd): Optimizer
        rng (SeededRng): Stream for this step
        seq_len (int): Sequence length
        strategy (str): Storage strategy
        shadow (bool): Also compute exact gradients and record the deviation

    Returns:
        StepResult
    """
    X, labels = batch
    loss, grads, ledger = compute_gradients(model, X, labels, seq_len, policy, rng, strategy)
    grad_err = None
    if shadow:
        _, exact, _ = compute_gradients(model, X, labels, seq_len, CompressionPolicy.exact(), rng, strategy)
        grad_err = grad_compare(grads, exact, mode='normwise').max_error
    if not math.isfinite(loss):
        return StepResult(loss, ledger, grad_err)
    optimizer.step(model.params, grads)
    return StepResult(loss, ledger, grad_err)


@dataclass
class TrainResult:
    losses: List[float]
    ledger: MemoryLedger
    grad_errors: List[Optional[float]]
    model: ToyTransformer
    optimizer: object
    final_loss: float = float('nan')

    def curve_rows(self):
        return [{'step': i, 'loss': loss, 'grad_err_vs_exact': err}
                for i, (loss, err) in enumerate(zip(self.losses, self.grad_errors))]


def train_loop(config, policy=None, strategy=None):
    """
    Toy LoRA fine-tuning run.

    Args:
        config (RunConfig): Run configuration
        policy (CompressionPolicy): Overrides config.policy when given
        strategy (str): Overrides config.task.strategy when given

    Returns:
        TrainResult: Loss curve, last step's ledger, optional gradient errors
            and the loss over the whole training set

    Raises:
        TrainingDiverged: If the loss becomes non-finite
    """
    policy = policy if policy is not None else config.policy.to_policy()
    strategy = strategy or config.task.strategy
    root = SeededRng(config.seed)
    model = build_model(config.model, root.child('model'), config.precision)
    task = make_task(config.task, config.model, root.child('task'), config.precision)
    optimizer = build_optimizer(config.task)

    losses, grad_errors = [], []
    ledger = MemoryLedger()
    for step in range(config.task.steps):
        batch = task.batch(step, config.task.batch)
        try:
            result = train_step(model, batch, policy, optimizer, root.child(f"step-{step}"),
                                task.seq_len, strategy, config.task.shadow)
        except DomainError as e:
            # an op produced NaN/Inf before the loss did
            raise TrainingDiverged(step, float('nan')) from e
        if not math.isfinite(result.loss):
            raise TrainingDiverged(step, result.loss)
        losses.append(result.loss)
        grad_errors.append(result.grad_err)
        ledger = result.ledger
        if step % 50 == 0 or step == config.task.steps - 1:
            logger.info(f"step {step}: loss={result.loss:.5f} act_bytes={ledger.stored_total} "
                        f"({policy.describe()}, {strategy})")
    final_loss = evaluate_loss(model, task)
    logger.info(f"final loss over {task.size} sequences: {final_loss:.5f}")
    return TrainResult(losses, ledger, grad_errors, model, optimizer, final_loss)
