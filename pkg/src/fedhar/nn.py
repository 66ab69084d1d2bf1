"""Small numpy networks with hand-written gradients, plus AdamW.

Two architectures are supported:

* ``flat-dense``: every modality slot is concatenated (absent slots are
  zero) into one wide input feeding a tanh MLP. Capacity grows with the
  number of modality slots.
* ``token-pooling``: a shared tanh encoder embeds each present modality
  slot, the embeddings are mean-pooled over present slots, and a linear
  head classifies the pooled vector. The parameter count does not depend on
  how many slots a sample can carry.

Parameters live in one flat float64 vector. Layers are stored in order, each
as a ``(fan_in, fan_out)`` row-major weight matrix followed by its bias, so
a layer computes ``x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("flat-dense", "token-pooling")
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class Architecture:
    kind: str
    input_width_per_modality: int
    num_modalities_max: int = 3
    hidden_widths: tuple[int, ...] = ()
    num_classes: int = 6

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown architecture kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "hidden_widths", tuple(int(h) for h in self.hidden_widths))
        for name in ("input_width_per_modality", "num_modalities_max", "num_classes"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if any(h < 1 for h in self.hidden_widths):
            raise ValueError("hidden widths must be positive integers")

    @property
    def input_width(self) -> int:
        """Width of the first layer's input."""
        if self.kind == "flat-dense":
            return self.input_width_per_modality * self.num_modalities_max
        return self.input_width_per_modality

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_width, *self.hidden_widths, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))


def param_count(arch: Architecture) -> int:
    return sum(i * o + o for i, o in arch.layer_shapes())


def unpack(params: np.ndarray, arch: Architecture) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into per-layer ``(W, b)`` views (no copies)."""
    if params.ndim != 1 or params.shape[0] != param_count(arch):
        raise ValueError(
            f"parameter vector of shape {params.shape} does not match {arch.kind} "
            f"with {param_count(arch)} parameters"
        )
    layers = []
    pos = 0
    for i, o in arch.layer_shapes():
        W = params[pos:pos + i * o].reshape(i, o)
        pos += i * o
        b = params[pos:pos + o]
        pos += o
        layers.append((W, b))
    return layers


def init_model(arch: Architecture, seed: int) -> np.ndarray:
    """Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases."""
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    params = np.zeros(param_count(arch))
    for W, _ in unpack(params, arch):
        limit = np.sqrt(6.0 / (W.shape[0] + W.shape[1]))
        W[...] = rng.uniform(-limit, limit, size=W.shape)
    return params


def _check_batch(arch: Architecture, features: np.ndarray, mask: np.ndarray) -> None:
    want = (arch.num_modalities_max, arch.input_width_per_modality)
    if features.ndim != 3 or features.shape[1:] != want:
        raise ValueError(f"features must have shape (n, {want[0]}, {want[1]}), got {features.shape}")
    if mask.shape != features.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match features {features.shape}")
    if features.shape[0] and not np.all(mask.any(axis=1)):
        raise ValueError("every sample needs at least one present modality slot")


def _stack_forward(x, layers):
    acts = [x]
    for W, b in layers:
        x = np.tanh(x @ W + b)
        acts.append(x)
    return acts


def _stack_backward(acts, layers, grad_layers, dout):
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        dz = dout * (1.0 - acts[k + 1] ** 2)
        gW, gb = grad_layers[k]
        gW += acts[k].T @ dz
        gb += dz.sum(axis=0)
        dout = dz @ W.T
    return dout


def _forward(params, arch, features, mask):
    _check_batch(arch, features, mask)
    layers = unpack(params, arch)
    body, (W_out, b_out) = layers[:-1], layers[-1]
    n, m, w = features.shape
    maskf = mask.astype(float)
    if arch.kind == "flat-dense":
        x = (features * maskf[:, :, None]).reshape(n, m * w)
        acts = _stack_forward(x, body)
        rep = acts[-1]
        pool_w = None
    else:
        acts = _stack_forward(features.reshape(n * m, w), body)
        emb = acts[-1].reshape(n, m, -1)
        pool_w = maskf / maskf.sum(axis=1, keepdims=True)
        rep = np.einsum("nm,nmd->nd", pool_w, emb)
    logits = rep @ W_out + b_out
    return logits, (layers, acts, rep, pool_w, n, m)


def forward(params: np.ndarray, arch: Architecture, features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Logits of shape ``(n, num_classes)`` for features ``(n, slots, width)``."""
    return _forward(params, arch, features, mask)[0]


def _backward(params, arch, cache, dlogits):
    layers, acts, rep, pool_w, n, m = cache
    grad = np.zeros_like(params)
    grad_layers = unpack(grad, arch)
    W_out, _ = layers[-1]
    gW, gb = grad_layers[-1]
    gW += rep.T @ dlogits
    gb += dlogits.sum(axis=0)
    drep = dlogits @ W_out.T
    if arch.kind == "flat-dense":
        _stack_backward(acts, layers[:-1], grad_layers[:-1], drep)
    else:
        demb = pool_w[:, :, None] * drep[:, None, :]
        _stack_backward(acts, layers[:-1], grad_layers[:-1], demb.reshape(n * m, -1))
    return grad


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, max-shifted."""
    z = np.asarray(logits, dtype=float)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(labels, num_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return labels


def cross_entropy(probs: np.ndarray, labels) -> float:
    """Mean negative log-likelihood of ``labels`` under row-normalised ``probs``."""
    probs = np.atleast_2d(probs)
    labels = _check_labels(labels, probs.shape[1])
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def kl_divergence(p: np.ndarray, q: np.ndarray):
    """KL(p || q) along the last axis; ``q`` is floored at 1e-12 and 0*log0 = 0."""
    p = np.asarray(p, dtype=float)
    q = np.maximum(np.asarray(q, dtype=float), PROB_FLOOR)
    safe_p = np.where(p > 0, p, 1.0)
    terms = np.where(p > 0, p * np.log(safe_p / q), 0.0)
    return terms.sum(axis=-1)


def loss_and_grad(
    params: np.ndarray,
    arch: Architecture,
    features: np.ndarray,
    mask: np.ndarray,
    labels,
    peer_probs: np.ndarray | None = None,
    kl_weight: float | None = None,
) -> tuple[float, np.ndarray]:
    """Batch loss and its gradient with respect to ``params``.

    With ``kl_weight=None`` the loss is plain cross-entropy. Otherwise it is
    ``CE + kl_weight * mean_i KL(peer_i || own_i)``, where ``peer_probs`` are
    constants: no gradient reaches the peer model.
    """
    logits, cache = _forward(params, arch, features, mask)
    labels = _check_labels(labels, arch.num_classes)
    n = logits.shape[0]
    probs = softmax(logits)
    loss = cross_entropy(probs, labels)
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    if kl_weight is not None:
        if peer_probs is None:
            raise ValueError("mutual loss requires peer_probs")
        if peer_probs.shape != probs.shape:
            raise ValueError(f"peer_probs shape {peer_probs.shape} != {probs.shape}")
        if kl_weight != 0:
            loss += kl_weight * float(np.mean(kl_divergence(peer_probs, probs)))
            dlogits += kl_weight * (probs - peer_probs)
    dlogits /= n
    return loss, _backward(params, arch, cache, dlogits)


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    epsilon: float = 1e-8
    batch_size: int = 10

    def __post_init__(self):
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValueError("betas must lie strictly between 0 and 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise ValueError("learning_rate and epsilon must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, n: int) -> "OptimizerState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adamw_step(
    params: np.ndarray, grads: np.ndarray, state: OptimizerState, cfg: OptimizerConfig
) -> tuple[np.ndarray, OptimizerState]:
    """One AdamW update with decoupled weight decay and bias correction."""
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ValueError("params, grads and optimizer state must share one shape")
    t = state.step_count + 1
    m = cfg.beta1 * state.first_moment + (1.0 - cfg.beta1) * grads
    v = cfg.beta2 * state.second_moment + (1.0 - cfg.beta2) * grads * grads
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    new = params - cfg.learning_rate * (m_hat / (np.sqrt(v_hat) + cfg.epsilon) + cfg.weight_decay * params)
    return new, OptimizerState(m, v, t)
