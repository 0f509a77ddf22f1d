"""Dense MLP substrate: fixed-architecture feed-forward net, exact backprop,
cross-entropy, and Adam.

All math is float64 numpy. The architecture is a chain of linear layers with
ReLU on every hidden layer and a linear (logit) output head; gradients are
hand-derived, not autodiff. Everything here is a pure function over immutable
inputs: optimizer steps return fresh parameter/state objects.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .memory import FeatureMask


@dataclass
class MlpParams:
    """Per-layer weight matrices and bias vectors.

    weights[l] has shape (N_l, N_{l+1}); biases[l] has shape (N_{l+1},).
    Adjacent layer dimensions chain.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def layout(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w in self.weights) + (self.weights[-1].shape[1],)

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


# Gradients mirror the parameter block structure exactly.
@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "Gradients":
        return Gradients([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class AdamState:
    m_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_w: list[np.ndarray]
    v_b: list[np.ndarray]
    step: int = 0


@dataclass
class Batch:
    """A batch of row-vector inputs with integer class labels."""

    inputs: np.ndarray  # (n, D) float64
    labels: np.ndarray  # (n,) int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)


def init_params(layout: Sequence[int], seed: int) -> MlpParams:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    layout = tuple(int(n) for n in layout)
    if any(n < 1 for n in layout):
        raise ValueError(f"layer sizes must be >= 1, got {layout}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layout[:-1], layout[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def zeros_like_grads(params: MlpParams) -> Gradients:
    return Gradients(
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
    )


def init_adam(params: MlpParams) -> AdamState:
    return AdamState(
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
    )


def forward(params: MlpParams, inputs: np.ndarray) -> tuple[np.ndarray, list]:
    """Run the net; returns (logits, cache) where cache holds the layer inputs
    and pre-activations needed by backward()."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise ValueError(
            f"inputs shape {x.shape} does not match first layer ({params.weights[0].shape[0]} features)"
        )
    acts = [x]  # input to each layer
    preacts = []
    n_layers = len(params.weights)
    a = x
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        preacts.append(z)
        if l < n_layers - 1:
            a = np.maximum(z, 0.0)
            acts.append(a)
    logits = preacts[-1]
    return logits, [acts, preacts]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log softmax probability of the true class."""
    ls = _log_softmax(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    return float(-ls[np.arange(len(labels)), labels].mean())


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(logits))


def backward_from_dlogits(params: MlpParams, cache: list, dlogits: np.ndarray) -> Gradients:
    """Backpropagate an arbitrary gradient at the logits through the net."""
    acts, preacts = cache
    n_layers = len(params.weights)
    g_w = [None] * n_layers
    g_b = [None] * n_layers
    delta = dlogits
    for l in range(n_layers - 1, -1, -1):
        g_w[l] = acts[l].T @ delta
        g_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ params.weights[l].T) * (preacts[l - 1] > 0.0)
    return Gradients(g_w, g_b)


def backward(params: MlpParams, batch: Batch, cache: list) -> Gradients:
    """Exact gradient of mean cross-entropy w.r.t. every parameter."""
    _, preacts = cache
    logits = preacts[-1]
    n = logits.shape[0]
    dlogits = softmax(logits)
    dlogits[np.arange(n), batch.labels] -= 1.0
    dlogits /= n
    return backward_from_dlogits(params, cache, dlogits)


def loss_and_grads(params: MlpParams, batch: Batch) -> tuple[float, Gradients]:
    logits, cache = forward(params, batch.inputs)
    return cross_entropy(logits, batch.labels), backward(params, batch, cache)


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(
    params: MlpParams, grads: Gradients, state: AdamState, lr: float
) -> tuple[MlpParams, AdamState]:
    """Standard bias-corrected Adam update; returns fresh params and state."""
    t = state.step + 1
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    new_w, new_b = [], []
    new_mw, new_mb, new_vw, new_vb = [], [], [], []
    for kind, (ps, gs, ms, vs, outs, out_m, out_v) in enumerate(
        [
            (params.weights, grads.weights, state.m_w, state.v_w, new_w, new_mw, new_vw),
            (params.biases, grads.biases, state.m_b, state.v_b, new_b, new_mb, new_vb),
        ]
    ):
        for p, g, m, v in zip(ps, gs, ms, vs):
            m2 = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
            v2 = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
            update = (m2 / c1) / (np.sqrt(v2 / c2) + ADAM_EPS)
            outs.append(p - lr * update)
            out_m.append(m2)
            out_v.append(v2)
    return MlpParams(new_w, new_b), AdamState(new_mw, new_mb, new_vw, new_vb, t)


def apply_input_mask(inputs: np.ndarray, mask: "FeatureMask") -> np.ndarray:
    """Copy of `inputs` with the mask's pruned feature columns zeroed."""
    x = np.asarray(inputs, dtype=np.float64)
    if mask.D != x.shape[1]:
        raise ValueError(f"mask over {mask.D} features applied to {x.shape[1]}-feature inputs")
    out = x.copy()
    if len(mask.pruned):
        out[:, mask.pruned] = 0.0
    return out


def add_scaled(dst: Gradients, src: Gradients, scale: float) -> None:
    """In-place dst += scale * src over every block."""
    for d, s in zip(dst.weights, src.weights):
        d += scale * s
    for d, s in zip(dst.biases, src.biases):
        d += scale * s
