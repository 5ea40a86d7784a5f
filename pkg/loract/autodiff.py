"""
Minimal reverse-mode tape with policy-governed activation storage.

Each op computes its value exactly and records a node holding only what its
vector-Jacobian product needs. Saved operands go through the tape's
CompressionPolicy, so a node may keep a rank-k factor instead of the matrix;
backward evaluates every VJP at the reconstructed activation. The forward
values themselves are never altered by the policy.
"""

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np

from .compress import (
    CompressionPolicy,
    MemoryLedger,
    StoredActivation,
    compress_activation,
    retrieve_activation,
    store_exact,
)
from .errors import ContractViolation, DomainError, TapeError
from .linalg import SeededRng, as_matrix, ensure_finite, matmul

GELU_C = math.sqrt(2.0 / math.pi)

# Sign of the correction term in the RMSNorm backward; flipped only by
# mutated_norm_backward() to self-test the gradient checks.
_correction_sign = 1.0


@contextmanager
def mutated_norm_backward():
    """Temporarily corrupt the RMSNorm backward (harness self-test)."""
    global _correction_sign
    _correction_sign = -1.0
    try:
        yield
    finally:
        _correction_sign = 1.0


@dataclass
class Tensor:
    """A value on (or off) a tape. Constants carry no node id."""

    value: np.ndarray
    node_id: Optional[int] = None
    requires_grad: bool = False
    name: Optional[str] = None

    @property
    def shape(self):
        return self.value.shape


@dataclass
class TapeNode:
    node_id: int
    op: str
    inputs: Tuple[Optional[int], ...]
    shape: Tuple[int, int]
    saved: Dict[str, StoredActivation] = field(default_factory=dict)
    aux: Dict[str, np.ndarray] = field(default_factory=dict)
    attrs: Dict[str, Any] = field(default_factory=dict)


class GradMap(dict):
    """node id -> gradient matrix."""

    def of(self, tensor):
        if tensor.node_id is None or tensor.node_id not in self:
            raise TapeError(f"no gradient recorded for tensor {tensor.name or tensor.node_id}")
        return self[tensor.node_id]


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def rms_of(x, eps):
    """Row-wise root mean square with stabilizer eps."""
    return np.sqrt(np.mean(np.square(x), axis=1) + eps)


def norm_backward(grad_a, a, gamma, rms):
    """
    RMSNorm backward from the normalized output A = (X / rms) * gamma.

    x_bar = A / gamma; g_bar = grad_A * gamma;
    grad_X = (g_bar - x_bar * mean_j(g_bar * x_bar)) / rms.

    Args:
        grad_a (np.ndarray): m x n upstream gradient w.r.t. A
        a (np.ndarray): m x n (possibly reconstructed) normalized output
        gamma (np.ndarray): 1 x n scaling vector
        rms (np.ndarray): length-m RMS values

    Returns:
        tuple: (grad_X m x n, grad_gamma 1 x n)
    """
    if np.any(gamma == 0.0):
        raise DomainError("gamma has a zero entry; the normalized input cannot be recovered")
    x_bar = a / gamma
    g_bar = grad_a * gamma
    row_mean = np.mean(g_bar * x_bar, axis=1, keepdims=True)
    grad_x = (g_bar - _correction_sign * x_bar * row_mean) / rms[:, None]
    grad_gamma = np.sum(grad_a * x_bar, axis=0, keepdims=True)
    return grad_x, grad_gamma


def _split_heads(x, batch, seq_len, heads):
    d = x.shape[1]
    return x.reshape(batch, seq_len, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    batch, heads, seq_len, head_dim = x.shape
    return x.transpose(0, 2, 1, 3).reshape(batch * seq_len, heads * head_dim)


def attention_probs(q, k, heads, seq_len, causal):
    """Softmax(Q K^T / sqrt(d_head)) per sequence and head, shape (B, H, T, T)."""
    batch = q.shape[0] // seq_len
    qh = _split_heads(q, batch, seq_len, heads)
    kh = _split_heads(k, batch, seq_len, heads)
    scores = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(qh.shape[-1])
    if causal:
        mask = np.triu(np.ones((seq_len, seq_len), dtype=bool), k=1)
        scores = np.where(mask, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)


class Tape:
    """
    Reverse-mode tape.

    Args:
        policy (CompressionPolicy): Storage policy for saved activations
        rng (SeededRng): Root stream; each saved activation uses a labeled child
        ledger (MemoryLedger): Ledger receiving every saved activation
        record (bool): When False, ops only compute values (no nodes, no saves)
        label (str): Prefix for ledger labels
    """

    def __init__(self, policy=None, rng=None, ledger=None, record=True, label='tape'):
        self.policy = policy if policy is not None else CompressionPolicy.exact()
        self.rng = rng if rng is not None else SeededRng(0)
        self.ledger = ledger if ledger is not None else MemoryLedger()
        self.record = record
        self.label = label
        self.nodes = []

    # -- bookkeeping -----------------------------------------------------

    def leaf(self, value, requires_grad=True, name=None):
        """Register an input matrix; it receives a gradient when requires_grad."""
        value = as_matrix(value, name or 'leaf')
        if not self.record:
            return Tensor(value, name=name)
        node = TapeNode(len(self.nodes), 'leaf', (), value.shape)
        self.nodes.append(node)
        return Tensor(value, node.node_id, requires_grad, name)

    def constant(self, value, name=None):
        """A value that takes part in no gradient computation."""
        return Tensor(as_matrix(value, name or 'constant'), name=name)

    def _tracking(self, *tensors):
        return self.record and any(t.requires_grad for t in tensors)

    def _save(self, node_id, op, name, value, compress=True, ledger=True):
        label = f"{self.label}/{op}#{node_id}.{name}"
        if compress:
            stored = compress_activation(value, self.policy, self.rng.child(label), label)
        else:
            stored = store_exact(value)
        if ledger:
            self.ledger.record(label, stored)
        return stored

    def _emit(self, node_id, op, value, inputs, saved=None, aux=None, attrs=None):
        ensure_finite(value, op)
        if node_id != len(self.nodes):
            raise TapeError(f"node id {node_id} out of sequence")
        node = TapeNode(
            node_id=node_id,
            op=op,
            inputs=tuple(t.node_id if t.requires_grad else None for t in inputs),
            shape=value.shape,
            saved=saved or {},
            aux=aux or {},
            attrs=attrs or {},
        )
        self.nodes.append(node)
        return Tensor(value, node_id, True)

    # -- forward ops -----------------------------------------------------

    def matmul(self, a, b):
        value = matmul(a.value, b.value)
        if not self._tracking(a, b):
            return Tensor(value)
        nid = len(self.nodes)
        saved = {}
        if b.requires_grad:
            saved['a'] = self._save(nid, 'matmul', 'a', a.value)
        if a.requires_grad:
            saved['b'] = self._save(nid, 'matmul', 'b', b.value)
        return self._emit(nid, 'matmul', value, (a, b), saved)

    def add(self, a, b):
        if a.shape != b.shape:
            raise ContractViolation(f"add shapes disagree: {a.shape} vs {b.shape}")
        value = a.value + b.value
        if not self._tracking(a, b):
            return Tensor(value)
        return self._emit(len(self.nodes), 'add', value, (a, b))

    def scale(self, a, c):
        value = a.value * c
        if not self._tracking(a):
            return Tensor(value)
        return self._emit(len(self.nodes), 'scale', value, (a,), attrs={'c': c})

    def linear_frozen(self, x, W):
        """x W with a frozen weight; the VJP needs only W, so nothing is saved."""
        W = as_matrix(W, 'W')
        value = matmul(x.value, W)
        if not self._tracking(x):
            return Tensor(value)
        return self._emit(len(self.nodes), 'linear_frozen', value, (x,), attrs={'W': W})

    def lora_linear(self, x, W, down, up, alpha):
        """
        x W + alpha (x down) up with frozen W and trainable adapter factors.

        The input is saved under the policy; the adapter factors are tiny
        trainables and are kept exact.
        """
        W = as_matrix(W, 'W')
        hidden = matmul(x.value, down.value)
        value = matmul(x.value, W) + alpha * matmul(hidden, up.value)
        if not self._tracking(x, down, up):
            return Tensor(value)
        nid = len(self.nodes)
        saved = {
            'down': self._save(nid, 'lora_linear', 'down', down.value, compress=False, ledger=False),
            'up': self._save(nid, 'lora_linear', 'up', up.value, compress=False, ledger=False),
        }
        if down.requires_grad or up.requires_grad:
            saved['x'] = self._save(nid, 'lora_linear', 'x', x.value)
        return self._emit(nid, 'lora_linear', value, (x, down, up), saved,
                          attrs={'W': W, 'alpha': alpha})

    def rmsnorm(self, x, gamma, eps=1e-6, save='output'):
        """
        Row-wise RMS normalization scaled by gamma (1 x n).

        save='output' keeps the normalized output plus the RMS vector and
        recovers the input gradient from them; save='input' is the
        conventional form that keeps the input itself.
        """
        if gamma.shape != (1, x.shape[1]):
            raise ContractViolation(f"gamma must be 1 x {x.shape[1]}, got {gamma.shape}")
        if save not in ('output', 'input'):
            raise ContractViolation(f"unknown rmsnorm save mode: {save!r}")
        rms = rms_of(x.value, eps)
        value = x.value / rms[:, None] * gamma.value
        if not self._tracking(x, gamma):
            return Tensor(value)
        nid = len(self.nodes)
        if save == 'output':
            saved = {'a': self._save(nid, 'rmsnorm', 'a', value)}
            aux = {'rms': rms}
            self.ledger.record_vector(f"{self.label}/rmsnorm#{nid}.rms", rms)
        else:
            saved = {'x': self._save(nid, 'rmsnorm', 'x', x.value)}
            aux = {}
        return self._emit(nid, 'rmsnorm', value, (x, gamma), saved, aux,
                          attrs={'eps': eps, 'gamma': gamma.value, 'save': save})

    def softmax_rows(self, x):
        value = softmax(x.value)
        if not self._tracking(x):
            return Tensor(value)
        nid = len(self.nodes)
        return self._emit(nid, 'softmax_rows', value, (x,), {'y': self._save(nid, 'softmax_rows', 'y', value)})

    def silu(self, x):
        value = x.value * sigmoid(x.value)
        if not self._tracking(x):
            return Tensor(value)
        nid = len(self.nodes)
        return self._emit(nid, 'silu', value, (x,), {'x': self._save(nid, 'silu', 'x', x.value)})

    def gelu(self, x):
        """Tanh-approximated GELU."""
        u = GELU_C * (x.value + 0.044715 * x.value ** 3)
        value = 0.5 * x.value * (1.0 + np.tanh(u))
        if not self._tracking(x):
            return Tensor(value)
        nid = len(self.nodes)
        return self._emit(nid, 'gelu', value, (x,), {'x': self._save(nid, 'gelu', 'x', x.value)})

    def activation(self, x, kind='silu'):
        if kind == 'silu':
            return self.silu(x)
        if kind == 'gelu':
            return self.gelu(x)
        raise ContractViolation(f"unknown activation: {kind!r}")

    def attention(self, q, k, v, heads, seq_len, causal=False):
        """
        Multi-head scaled dot-product attention over B sequences stacked as rows.

        Q, K, V and the attention probabilities are saved for backward.
        """
        m, d = q.shape
        if k.shape != (m, d) or v.shape != (m, d):
            raise ContractViolation(f"q, k, v shapes disagree: {q.shape}, {k.shape}, {v.shape}")
        if d % heads or m % seq_len:
            raise ContractViolation(f"width {d} / heads {heads} or rows {m} / seq_len {seq_len} not divisible")
        batch = m // seq_len
        probs = attention_probs(q.value, k.value, heads, seq_len, causal)
        value = _merge_heads(probs @ _split_heads(v.value, batch, seq_len, heads))
        if not self._tracking(q, k, v):
            return Tensor(value)
        nid = len(self.nodes)
        saved = {
            'q': self._save(nid, 'attention', 'q', q.value),
            'k': self._save(nid, 'attention', 'k', k.value),
            'v': self._save(nid, 'attention', 'v', v.value),
            'probs': self._save(nid, 'attention', 'probs', probs.reshape(-1, seq_len)),
        }
        return self._emit(nid, 'attention', value, (q, k, v), saved,
                          attrs={'heads': heads, 'seq_len': seq_len})

    def mean_pool(self, x, seq_len):
        """Average each block of seq_len rows: (B*T) x d -> B x d."""
        m, d = x.shape
        if m % seq_len:
            raise ContractViolation(f"rows {m} not divisible by seq_len {seq_len}")
        value = x.value.reshape(m // seq_len, seq_len, d).mean(axis=1)
        if not self._tracking(x):
            return Tensor(value)
        return self._emit(len(self.nodes), 'mean_pool', value, (x,), attrs={'seq_len': seq_len})

    def cross_entropy(self, logits, labels):
        """Mean cross-entropy of row logits against integer labels (1 x 1 loss)."""
        labels = np.asarray(labels, dtype=np.int64)
        m, classes = logits.shape
        if labels.shape != (m,):
            raise ContractViolation(f"expected {m} labels, got shape {labels.shape}")
        if labels.min() < 0 or labels.max() >= classes:
            raise ContractViolation(f"labels out of range [0, {classes})")
        z = logits.value
        shifted = z - z.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1))
        losses = log_norm - shifted[np.arange(m), labels]
        value = np.array([[losses.mean()]], dtype=z.dtype)
        if not self._tracking(logits):
            return Tensor(value)
        nid = len(self.nodes)
        return self._emit(nid, 'cross_entropy', value, (logits,),
                          {'logits': self._save(nid, 'cross_entropy', 'logits', z)},
                          attrs={'labels': labels})

    def mse(self, x, target):
        """Mean squared error against a constant target (1 x 1 loss)."""
        target = as_matrix(target, 'target')
        if target.shape != x.shape:
            raise ContractViolation(f"mse shapes disagree: {x.shape} vs {target.shape}")
        diff = x.value - target
        value = np.array([[np.mean(np.square(diff))]], dtype=diff.dtype)
        if not self._tracking(x):
            return Tensor(value)
        nid = len(self.nodes)
        return self._emit(nid, 'mse', value, (x,), {'diff': self._save(nid, 'mse', 'diff', diff)})

    # -- backward --------------------------------------------------------

    def backward(self, output, seed=None):
        """
        Reverse sweep from `output`.

        Args:
            output (Tensor): Scalar loss, or any tensor when `seed` is given
            seed (np.ndarray): Upstream gradient for a non-scalar output

        Returns:
            GradMap: Gradients for every node reached, inputs included
        """
        if output.node_id is None:
            raise TapeError("output is not recorded on this tape")
        if seed is None:
            if output.shape != (1, 1):
                raise ContractViolation(f"backward needs a 1 x 1 loss, got {output.shape}")
            seed = np.ones((1, 1), dtype=output.value.dtype)
        elif seed.shape != output.shape:
            raise ContractViolation(f"seed shape {seed.shape} does not match output {output.shape}")

        grads = GradMap({output.node_id: seed})
        for node in reversed(self.nodes[:output.node_id + 1]):
            g = grads.get(node.node_id)
            if g is None or node.op == 'leaf':
                continue
            restored = {name: retrieve_activation(s) for name, s in node.saved.items()}
            input_grads = _VJP[node.op](node, g, _Saved(node, restored))
            for input_id, gi in zip(node.inputs, input_grads):
                if input_id is None or gi is None:
                    continue
                grads[input_id] = grads[input_id] + gi if input_id in grads else gi
        return grads


class _Saved:
    """Reconstructed activations of one node, cached for the whole backward pass."""

    def __init__(self, node, restored):
        self.node = node
        self.restored = restored

    def __getitem__(self, name):
        try:
            return self.restored[name]
        except KeyError:
            raise TapeError(f"node {self.node.node_id} ({self.node.op}) has no saved '{name}'") from None


def _vjp_matmul(node, g, saved):
    a_id, b_id = node.inputs
    ga = g @ saved['b'].T if a_id is not None else None
    gb = saved['a'].T @ g if b_id is not None else None
    return ga, gb


def _vjp_add(node, g, saved):
    return g, g


def _vjp_scale(node, g, saved):
    return (g * node.attrs['c'],)


def _vjp_linear_frozen(node, g, saved):
    return (g @ node.attrs['W'].T,)


def _vjp_lora_linear(node, g, saved):
    x_id, down_id, up_id = node.inputs
    alpha = node.attrs['alpha']
    down = saved['down']
    up = saved['up']
    g_hidden = alpha * (g @ up.T)
    gx = g @ node.attrs['W'].T + g_hidden @ down.T if x_id is not None else None
    g_down = saved['x'].T @ g_hidden if down_id is not None else None
    g_up = alpha * (saved['x'] @ down).T @ g if up_id is not None else None
    return gx, g_down, g_up


def _vjp_rmsnorm(node, g, saved):
    gamma = node.attrs['gamma']
    if node.attrs['save'] == 'output':
        return norm_backward(g, saved['a'], gamma, node.aux['rms'])
    x = saved['x']
    n = x.shape[1]
    rms = rms_of(x, node.attrs['eps'])[:, None]
    g_scaled = g * gamma
    gx = g_scaled / rms - x * np.sum(g_scaled * x, axis=1, keepdims=True) / (n * rms ** 3)
    g_gamma = np.sum(g * x / rms, axis=0, keepdims=True)
    return gx, g_gamma


def _vjp_softmax_rows(node, g, saved):
    y = saved['y']
    return (y * (g - np.sum(g * y, axis=1, keepdims=True)),)


def _vjp_silu(node, g, saved):
    x = saved['x']
    s = sigmoid(x)
    return (g * s * (1.0 + x * (1.0 - s)),)


def _vjp_gelu(node, g, saved):
    x = saved['x']
    u = GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(u)
    du = GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * du),)


def _vjp_attention(node, g, saved):
    heads = node.attrs['heads']
    seq_len = node.attrs['seq_len']
    q, k, v = saved['q'], saved['k'], saved['v']
    batch = q.shape[0] // seq_len
    probs = saved['probs'].reshape(batch, heads, seq_len, seq_len)
    qh = _split_heads(q, batch, seq_len, heads)
    kh = _split_heads(k, batch, seq_len, heads)
    vh = _split_heads(v, batch, seq_len, heads)
    gh = _split_heads(g, batch, seq_len, heads)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    g_probs = gh @ vh.transpose(0, 1, 3, 2)
    gv = probs.transpose(0, 1, 3, 2) @ gh
    g_scores = probs * (g_probs - np.sum(g_probs * probs, axis=-1, keepdims=True))
    gq = g_scores @ kh * scale
    gk = g_scores.transpose(0, 1, 3, 2) @ qh * scale
    return _merge_heads(gq), _merge_heads(gk), _merge_heads(gv)


def _vjp_mean_pool(node, g, saved):
    seq_len = node.attrs['seq_len']
    return (np.repeat(g / seq_len, seq_len, axis=0),)


def _vjp_cross_entropy(node, g, saved):
    logits = saved['logits']
    labels = node.attrs['labels']
    m = logits.shape[0]
    probs = softmax(logits)
    probs[np.arange(m), labels] -= 1.0
    return (probs * (g[0, 0] / m),)


def _vjp_mse(node, g, saved):
    diff = saved['diff']
    return (2.0 * diff * (g[0, 0] / diff.size),)


_VJP = {
    'matmul': _vjp_matmul,
    'add': _vjp_add,
    'scale': _vjp_scale,
    'linear_frozen': _vjp_linear_frozen,
    'lora_linear': _vjp_lora_linear,
    'rmsnorm': _vjp_rmsnorm,
    'softmax_rows': _vjp_softmax_rows,
    'silu': _vjp_silu,
    'gelu': _vjp_gelu,
    'attention': _vjp_attention,
    'mean_pool': _vjp_mean_pool,
    'cross_entropy': _vjp_cross_entropy,
    'mse': _vjp_mse,
}


def finite_diff_grad(f, x, h=1e-5):
    """
    Central-difference gradient of a scalar function of a matrix.

    Args:
        f (callable): Maps an m x n float64 matrix to a float
        x (np.ndarray): Evaluation point
        h (float): Step size (> 0)

    Returns:
        np.ndarray: (f(x + h e) - f(x - h e)) / (2 h) per element
    """
    if h <= 0:
        raise ContractViolation(f"step size must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        original = x[index]
        x[index] = original + h
        f_plus = float(f(x))
        x[index] = original - h
        f_minus = float(f(x))
        x[index] = original
        grad[index] = (f_plus - f_minus) / (2.0 * h)
    return grad


@dataclass(frozen=True)
class GradCompareReport:
    per_key: Dict[Any, float]
    max_error: float

    def as_rows(self):
        return [{'key': str(key), 'max_rel_err': err} for key, err in self.per_key.items()]


def grad_compare(g1, g2, mode='elementwise'):
    """
    Maximum relative gradient deviation of g1 from the reference g2.

    mode='elementwise' uses max |g1 - g2| / (|g2| + 1e-12) per key;
    mode='normwise' uses max |g1 - g2| / (max |g2| + 1e-12), which ignores
    relative noise on entries that are tiny compared with the whole gradient.

    Args:
        g1 (Mapping): key -> gradient
        g2 (Mapping): key -> reference gradient
        mode (str): 'elementwise' or 'normwise'

    Returns:
        GradCompareReport
    """
    if set(g1) != set(g2):
        missing = sorted(map(str, set(g1) ^ set(g2)))
        raise ContractViolation(f"gradient maps have different keys: {missing}")
    per_key = {}
    for key in sorted(g1, key=str):
        a = np.asarray(g1[key], dtype=np.float64)
        b = np.asarray(g2[key], dtype=np.float64)
        if a.shape != b.shape:
            raise ContractViolation(f"gradient shapes disagree for {key}: {a.shape} vs {b.shape}")
        diff = np.abs(a - b)
        if mode == 'elementwise':
            per_key[key] = float(np.max(diff / (np.abs(b) + 1e-12))) if diff.size else 0.0
        elif mode == 'normwise':
            per_key[key] = float(np.max(diff) / (np.max(np.abs(b)) + 1e-12)) if diff.size else 0.0
        else:
            raise ContractViolation(f"unknown comparison mode: {mode!r}")
    return GradCompareReport(per_key, max(per_key.values(), default=0.0))
