"""Regularization terms: first-layer group sparsity, neuronal-correlation
consolidation (NCC), and the baseline importance schemes (L2, EWC, SI, MAS)
used by the ablation driver.

NCC builds per-layer neuron correlations from connectivity-pattern similarity:
h(W) = |tanh(W)| soft-binarizes weights, A = (h h^T)^{elementwise 2} / N^2
scores how alike two neurons' outgoing connections are, neuron importance is
the weighted degree centrality (row sum of A), and synaptic importance is the
outer product of the two endpoint importances. The consolidation penalty is a
quadratic pull of each weight toward its snapshot, weighted by that synaptic
importance. Biases carry no NCC importance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .nn import Batch, Gradients, MlpParams, backward, backward_from_dlogits, forward


@dataclass
class ImportanceMap:
    """Per-layer non-negative weight importances, optional bias importances,
    and optional per-layer neuron importances."""

    weights: list[np.ndarray]
    biases: list[np.ndarray] | None = None
    neuron: list[np.ndarray] | None = None


VARIANTS = ("NCC", "L2", "EWC", "SI", "MAS", "NONE")


@dataclass
class RegConfig:
    alpha: float = 0.0005
    beta: float = 0.001
    variant: str = "NCC"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("regularization factors must be non-negative")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")


def group_lasso(W1: np.ndarray) -> tuple[float, np.ndarray]:
    """L2,1 norm over input-feature rows of the first-layer weights.

    Returns (sum of row norms, subgradient). Rows that are exactly zero get a
    zero subgradient row.
    """
    W1 = np.asarray(W1, dtype=np.float64)
    norms = np.sqrt((W1 * W1).sum(axis=1))
    value = float(norms.sum())
    sub = np.zeros_like(W1)
    nz = norms > 0.0
    sub[nz] = W1[nz] / norms[nz, None]
    return value, sub


def connectivity_strength(W: np.ndarray) -> np.ndarray:
    """Element-wise |tanh|: relative synaptic connectivity in [0, 1)."""
    return np.abs(np.tanh(W))


def neuron_correlation(W: np.ndarray) -> np.ndarray:
    """Pairwise correlation of the rows' connectivity patterns.

    A = (h h^T) squared element-wise, scaled by 1 / (fan-out)^2; symmetric
    with entries in [0, 1).
    """
    h = connectivity_strength(W)
    s = h @ h.T
    n_out = W.shape[1]
    return (s * s) / float(n_out * n_out)


def neuron_importance(A: np.ndarray) -> np.ndarray:
    """Weighted degree centrality: row sums of the correlation matrix."""
    return np.asarray(A, dtype=np.float64).sum(axis=1)


def synaptic_importance(p_l: np.ndarray, p_lplus1: np.ndarray) -> np.ndarray:
    """Rank-1 importance of each weight: product of its endpoint importances."""
    return np.outer(p_l, p_lplus1)


def refresh_ncc_importance(params: MlpParams, output_layer: str = "transpose") -> ImportanceMap:
    """Recompute neuron and synaptic importances from the current weights.

    The output layer has no outgoing block; its neuron importance is either
    computed from the transpose of the final weight matrix (incoming
    connectivity, default) or set uniform.
    """
    p_per_layer = [neuron_importance(neuron_correlation(w)) for w in params.weights]
    w_last = params.weights[-1]
    if output_layer == "transpose":
        p_out = neuron_importance(neuron_correlation(w_last.T))
    elif output_layer == "uniform":
        p_out = np.ones(w_last.shape[1])
    else:
        raise ValueError(f"unknown output-layer mode {output_layer!r}")
    p_per_layer.append(p_out)
    maps = [
        synaptic_importance(p_per_layer[l], p_per_layer[l + 1])
        for l in range(len(params.weights))
    ]
    return ImportanceMap(weights=maps, biases=None, neuron=p_per_layer)


def ncc_penalty(
    params: MlpParams, snapshot: MlpParams, importance: ImportanceMap
) -> tuple[float, Gradients]:
    """Importance-weighted quadratic pull toward the snapshot.

    value = sum P (theta - theta_hat)^2; gradient 2 P (theta - theta_hat) on
    weights. Biases contribute only when the importance map carries bias
    importances (baseline variants), never for NCC itself.
    """
    value = 0.0
    g_w, g_b = [], []
    for w, w_hat, p in zip(params.weights, snapshot.weights, importance.weights):
        d = w - w_hat
        value += float((p * d * d).sum())
        g_w.append(2.0 * p * d)
    if importance.biases is not None:
        for b, b_hat, p in zip(params.biases, snapshot.biases, importance.biases):
            d = b - b_hat
            value += float((p * d * d).sum())
            g_b.append(2.0 * p * d)
    else:
        g_b = [np.zeros_like(b) for b in params.biases]
    return value, Gradients(g_w, g_b)


def l2_importance(params: MlpParams) -> ImportanceMap:
    return ImportanceMap(
        weights=[np.ones_like(w) for w in params.weights],
        biases=[np.ones_like(b) for b in params.biases],
    )


def ewc_importance(params: MlpParams, batches: Iterable[Batch]) -> ImportanceMap:
    """Diagonal Fisher estimate: mean squared log-likelihood gradient over the
    provided batches."""
    acc_w = [np.zeros_like(w) for w in params.weights]
    acc_b = [np.zeros_like(b) for b in params.biases]
    count = 0
    for batch in batches:
        logits, cache = forward(params, batch.inputs)
        g = backward(params, batch, cache)
        for a, x in zip(acc_w, g.weights):
            a += x * x
        for a, x in zip(acc_b, g.biases):
            a += x * x
        count += 1
    if count == 0:
        raise ValueError("EWC importance needs at least one batch")
    return ImportanceMap(
        weights=[a / count for a in acc_w], biases=[a / count for a in acc_b]
    )


def mas_importance(params: MlpParams, inputs: np.ndarray, chunk: int = 1) -> ImportanceMap:
    """Mean absolute per-sample gradient of the squared output norm."""
    x = np.asarray(inputs, dtype=np.float64)
    acc_w = [np.zeros_like(w) for w in params.weights]
    acc_b = [np.zeros_like(b) for b in params.biases]
    n = x.shape[0]
    for i in range(0, n, chunk):
        xi = x[i : i + chunk]
        logits, cache = forward(params, xi)
        g = backward_from_dlogits(params, cache, 2.0 * logits)
        for a, v in zip(acc_w, g.weights):
            a += np.abs(v)
        for a, v in zip(acc_b, g.biases):
            a += np.abs(v)
    n_chunks = int(np.ceil(n / chunk))
    return ImportanceMap(
        weights=[a / n_chunks for a in acc_w], biases=[a / n_chunks for a in acc_b]
    )


class SiAccumulator:
    """Path-integral importance: per step, credit each parameter with the loss
    decrease attributable to its movement; at a task boundary, convert the
    accumulated credit into importance, damped by the squared total drift.

    Single-writer state owned by the training loop.
    """

    def __init__(self, params: MlpParams, damping: float = 1e-3):
        self.damping = damping
        self._w_w = [np.zeros_like(w) for w in params.weights]
        self._w_b = [np.zeros_like(b) for b in params.biases]
        self._omega_w = [np.zeros_like(w) for w in params.weights]
        self._omega_b = [np.zeros_like(b) for b in params.biases]
        self._start = params.copy()

    def update(self, grads: Gradients, old_params: MlpParams, new_params: MlpParams) -> None:
        for w, g, old, new in zip(self._w_w, grads.weights, old_params.weights, new_params.weights):
            w -= g * (new - old)
        for w, g, old, new in zip(self._w_b, grads.biases, old_params.biases, new_params.biases):
            w -= g * (new - old)

    def finalize_task(self, params: MlpParams) -> None:
        """Fold the running credit into cumulative importance and reset."""
        for om, w, new, start in zip(self._omega_w, self._w_w, params.weights, self._start.weights):
            drift = new - start
            om += np.maximum(w, 0.0) / (drift * drift + self.damping)
            w[:] = 0.0
        for om, w, new, start in zip(self._omega_b, self._w_b, params.biases, self._start.biases):
            drift = new - start
            om += np.maximum(w, 0.0) / (drift * drift + self.damping)
            w[:] = 0.0
        self._start = params.copy()

    def importance(self) -> ImportanceMap:
        return ImportanceMap(
            weights=[om.copy() for om in self._omega_w],
            biases=[om.copy() for om in self._omega_b],
        )


def baseline_importance(variant: str, params: MlpParams, context) -> ImportanceMap:
    """Dispatch for the data-driven baseline schemes.

    context: batches for EWC, an input matrix for MAS, an SiAccumulator for
    SI, ignored for L2.
    """
    if variant == "L2":
        return l2_importance(params)
    if variant == "EWC":
        return ewc_importance(params, context)
    if variant == "MAS":
        return mas_importance(params, context)
    if variant == "SI":
        return context.importance()
    raise ValueError(f"unknown importance variant {variant!r}")
