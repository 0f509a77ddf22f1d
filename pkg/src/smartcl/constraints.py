"""Backward-transfer constraint machinery: gradients restricted to the live
parameter set, the replay dot-product surrogate, violation projection, and
numeric verification of the first-order approximation and its error bound.

The live ("restricted") parameter set excludes first-layer weight rows of
pruned input features; its flat ordering is layer-major (weights then bias
per layer), row-major within a block. The per-step error bound is

    min_k max_{j != k} |lambda - (g_j / g_k) lambda| * ||g_ref||_2

over live components of the current-task gradient g, with near-zero g_k
excluded from the min; summing over optimizer steps is the caller's job.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .memory import FeatureMask
from .nn import Batch, Gradients, MlpParams, apply_input_mask, backward, cross_entropy, forward

log = logging.getLogger(__name__)

ZERO_DIVISION_FLOOR = 1e-12
BOUND_ABS_TOL = 1e-8
BOUND_REL_TOL = 1e-6


class NonFiniteLossError(RuntimeError):
    """Raised when a verification run's loss leaves the finite range."""


@dataclass
class RestrictedIndexSet:
    """Flat indices of live parameters: everything except first-layer weight
    rows of pruned features."""

    live: np.ndarray  # strictly increasing int64 flat indices
    J: int            # total parameter count
    c: int            # first-layer width
    pruned_count: int

    def __len__(self) -> int:
        return len(self.live)

    def compatible(self, other: "RestrictedIndexSet") -> bool:
        return (
            self.J == other.J
            and self.c == other.c
            and len(self.live) == len(other.live)
            and np.array_equal(self.live, other.live)
        )


@dataclass
class GradVec:
    """Flat float64 gradient over a restricted index set."""

    values: np.ndarray
    index_set: RestrictedIndexSet

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class BoundReport:
    """One verification record: step size, measured loss change, accumulated
    first-order sum, the theoretical bound, and whether the bound held."""

    lam: float
    empirical_delta: float
    first_order_sum: float
    epsilon_bound: float
    satisfied: bool
    skipped: bool = False

    def as_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "empirical_delta": self.empirical_delta,
            "first_order_sum": self.first_order_sum,
            "epsilon_bound": self.epsilon_bound,
            "satisfied": self.satisfied,
            "skipped": self.skipped,
        }


def _flatten(grads: Gradients) -> np.ndarray:
    parts = []
    for w, b in zip(grads.weights, grads.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def build_index_set(grads_or_params, mask: FeatureMask) -> RestrictedIndexSet:
    """Index set over the flat parameter vector for a given feature mask."""
    weights = grads_or_params.weights
    biases = grads_or_params.biases
    if mask.D != weights[0].shape[0]:
        raise ValueError(
            f"mask over {mask.D} features does not match first layer with {weights[0].shape[0]} rows"
        )
    J = sum(w.size for w in weights) + sum(b.size for b in biases)
    c = weights[0].shape[1]
    keep = np.ones(J, dtype=bool)
    for d in mask.pruned:
        keep[d * c : (d + 1) * c] = False
    return RestrictedIndexSet(
        live=np.nonzero(keep)[0].astype(np.int64),
        J=J,
        c=c,
        pruned_count=mask.n_pruned,
    )


def restrict(grads: Gradients, mask: FeatureMask, index_set: RestrictedIndexSet | None = None) -> GradVec:
    """Flatten and drop pruned first-layer weight rows."""
    if index_set is None:
        index_set = build_index_set(grads, mask)
    flat = _flatten(grads)
    return GradVec(values=flat[index_set.live], index_set=index_set)


def scatter_back(vec: GradVec, base: Gradients) -> Gradients:
    """Write the restricted values into a copy of `base`; pruned positions keep
    the base values."""
    flat = _flatten(base)
    flat[vec.index_set.live] = vec.values
    out = base.copy()
    pos = 0
    for w, b in zip(out.weights, out.biases):
        w[:] = flat[pos : pos + w.size].reshape(w.shape)
        pos += w.size
        b[:] = flat[pos : pos + b.size]
        pos += b.size
    return out


def violation(g_star: GradVec, g_ref: GradVec) -> float:
    """Constraint surrogate: the dot product. Negative means the current
    update direction would increase replay loss to first order."""
    if not g_star.index_set.compatible(g_ref.index_set):
        raise ValueError("gradient vectors live on different restricted index sets")
    return float(np.dot(g_star.values, g_ref.values))


def project(g_star: GradVec, g_ref: GradVec) -> GradVec:
    """Remove the replay-harming component:
    g' = g_star - (g_star . g_ref / ||g_ref||^2) g_ref."""
    denom = float(np.dot(g_ref.values, g_ref.values))
    if denom == 0.0:
        warnings.warn("projection reference gradient is zero; returning input unchanged")
        return GradVec(values=g_star.values.copy(), index_set=g_star.index_set)
    coef = float(np.dot(g_star.values, g_ref.values)) / denom
    return GradVec(values=g_star.values - coef * g_ref.values, index_set=g_star.index_set)


def reference_gradient(
    replay: Batch, params_prev: MlpParams, mask: FeatureMask,
    index_set: RestrictedIndexSet | None = None,
) -> GradVec:
    """Cross-entropy gradient on mask-zeroed replay inputs at the reference
    parameters, restricted to the live set."""
    if len(replay.labels) == 0:
        raise ValueError("replay batch is empty")
    inputs = apply_input_mask(replay.inputs, mask)
    batch = Batch(inputs, replay.labels)
    logits, cache = forward(params_prev, batch.inputs)
    grads = backward(params_prev, batch, cache)
    return restrict(grads, mask, index_set)


def _min_max_ratio_deviation(g: np.ndarray) -> float:
    """min over usable k of max over j != k of |1 - g_j / g_k|.

    Components with |g_k| below the division floor are excluded from the min.
    Returns +inf when no usable k remains; 0.0 for a single-component vector.
    """
    n = len(g)
    valid = np.abs(g) >= ZERO_DIVISION_FLOOR
    if not valid.any():
        return np.inf
    if n == 1:
        return 0.0
    order = np.argsort(g)
    lo1, lo2 = order[0], order[1]
    hi1, hi2 = order[-1], order[-2]
    idx = np.arange(n)
    # farthest value from g_k among j != k is an extreme; swap in the runner-up
    # when k itself holds the extreme index
    hi_vals = np.where(idx == hi1, g[hi2], g[hi1])
    lo_vals = np.where(idx == lo1, g[lo2], g[lo1])
    max_dev = np.maximum(np.abs(g - hi_vals), np.abs(g - lo_vals))
    ratios = max_dev[valid] / np.abs(g[valid])
    return float(ratios.min())


def epsilon_bound(g_t: GradVec, g_i: GradVec, lam: float) -> float:
    """Single-step error-bound term; the caller accumulates over steps."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    g = g_t.values
    if len(g) and not g.any():
        return 0.0
    dev = _min_max_ratio_deviation(g)
    if not np.isfinite(dev):
        log.warning("all current-gradient components below division floor; bound degenerates")
        return np.inf
    return dev * lam * float(np.linalg.norm(g_i.values))


def bound_satisfied(delta: float, bound: float) -> bool:
    return delta <= bound + BOUND_ABS_TOL + BOUND_REL_TOL * abs(bound)


def default_lambda_schedule(start: float = 1e-2, stop: float = 1e-5) -> list[float]:
    """Halving schedule from `start` down to the first value <= `stop`."""
    lams = [start]
    while lams[-1] > stop * 2:
        lams.append(lams[-1] / 2)
    return lams


def verify_first_order(
    params: MlpParams,
    replay: Batch,
    mask: FeatureMask,
    lambda_schedule: list[float],
    steps: int,
) -> list[BoundReport]:
    """Check the first-order approximation of the replay-loss change.

    For each step size, descend `steps` plain gradient steps on the replay
    loss (inputs zeroed by the mask) and compare the measured loss change
    against the accumulated first-order terms sum_s <g^(s), delta theta^(s)>
    over the live set. The gap is the Taylor remainder and must vanish
    quadratically as the step size shrinks; fit the exponent with
    fit_gap_exponent().
    """
    if any(l <= 0 for l in lambda_schedule):
        raise ValueError("lambda schedule must be positive")
    if any(b > a for a, b in zip(lambda_schedule, lambda_schedule[1:])):
        raise ValueError("lambda schedule must be decreasing")

    masked = Batch(apply_input_mask(replay.inputs, mask), replay.labels)
    index_set = build_index_set(params, mask)
    reports = []
    for lam in lambda_schedule:
        theta = params.copy()
        first_order = 0.0
        accumulated_bound = 0.0
        logits, cache = forward(theta, masked.inputs)
        loss0 = cross_entropy(logits, masked.labels)
        for _ in range(steps):
            logits, cache = forward(theta, masked.inputs)
            loss = cross_entropy(logits, masked.labels)
            if not np.isfinite(loss):
                raise NonFiniteLossError(f"loss diverged during verification at lambda={lam}")
            grads = backward(theta, Batch(masked.inputs, masked.labels), cache)
            g_vec = restrict(grads, mask, index_set)
            first_order += float(np.dot(g_vec.values, -lam * g_vec.values))
            accumulated_bound += epsilon_bound(g_vec, g_vec, lam)
            for w, gw in zip(theta.weights, grads.weights):
                w -= lam * gw
            for b, gb in zip(theta.biases, grads.biases):
                b -= lam * gb
        logits, _ = forward(theta, masked.inputs)
        loss1 = cross_entropy(logits, masked.labels)
        if not np.isfinite(loss1):
            raise NonFiniteLossError(f"loss diverged during verification at lambda={lam}")
        delta = loss1 - loss0
        reports.append(
            BoundReport(
                lam=lam,
                empirical_delta=delta,
                first_order_sum=first_order,
                epsilon_bound=accumulated_bound,
                satisfied=bound_satisfied(delta, accumulated_bound),
            )
        )
    return reports


def fit_gap_exponent(reports: list[BoundReport]) -> float:
    """Least-squares slope of log|empirical - first_order| against log lambda."""
    lams, gaps = [], []
    for r in reports:
        gap = abs(r.empirical_delta - r.first_order_sum)
        if gap > 0.0:
            lams.append(np.log(r.lam))
            gaps.append(np.log(gap))
    if len(lams) < 2:
        return np.inf  # gap identically zero: better than any power law
    slope, _ = np.polyfit(lams, gaps, 1)
    return float(slope)


def verification_suite(
    seed: int,
    n_nets: int = 20,
    steps: int = 4,
    holder_pairs: int = 10_000,
    projection_pairs: int = 10_000,
) -> dict:
    """Run the full numeric verification battery on random toy problems.

    Returns first-order reports with fitted gap exponents, the violation
    count of the per-step bound over random precondition-satisfying pairs,
    the projection-contract worst cases, and bound homogeneity spot checks.
    """
    rng = np.random.default_rng(seed)

    first_order = []
    nets_done = 0
    while nets_done < n_nets:
        layout = (
            int(rng.integers(3, 8)), int(rng.integers(4, 9)),
            int(rng.integers(4, 9)), int(rng.integers(2, 5)),
        )
        params = _random_params(layout, rng)
        n = int(rng.integers(4, 10))
        replay = Batch(rng.normal(size=(n, layout[0])), rng.integers(0, layout[-1], size=n))
        _, (_, preacts) = forward(params, replay.inputs)
        if min(np.abs(z).min() for z in preacts[:-1]) < 0.2:
            continue  # step path would straddle a ReLU kink
        reports = verify_first_order(params, replay, empty_mask_for(params), default_lambda_schedule(), steps)
        first_order.append({
            "layout": layout,
            "exponent": fit_gap_exponent(reports),
            "reports": reports,
        })
        nets_done += 1

    holder_violations = 0
    holder_checked = 0
    for _ in range(holder_pairs):
        dim = int(rng.integers(2, 51))
        g_t = -np.abs(rng.normal(size=dim))
        while True:
            g_i = rng.normal(size=dim)
            if float(np.dot(g_t, g_i)) >= 0.0:
                break
        r = verify_holder_bound(_toy_vec(g_t), _toy_vec(g_i), float(rng.uniform(1e-4, 1.0)))
        holder_checked += 1
        if not r.satisfied:
            holder_violations += 1

    worst_resid = 0.0
    norm_grew = 0
    for _ in range(projection_pairs):
        dim = int(rng.integers(2, 40))
        a = rng.normal(size=dim)
        b = rng.normal(size=dim)
        if np.dot(a, b) >= 0:
            b = -b
        out = project(_toy_vec(a), _toy_vec(b))
        scale = np.linalg.norm(a) * np.linalg.norm(b)
        worst_resid = max(worst_resid, abs(float(np.dot(out.values, b))) / scale if scale else 0.0)
        if np.linalg.norm(out.values) > np.linalg.norm(a) * (1 + 1e-12):
            norm_grew += 1

    max_homog_err = 0.0
    for _ in range(1000):
        dim = int(rng.integers(2, 30))
        g_t = _toy_vec(rng.normal(size=dim))
        g_i = _toy_vec(rng.normal(size=dim))
        lam = float(rng.uniform(1e-6, 1e-1))
        b1, b2 = epsilon_bound(g_t, g_i, lam), epsilon_bound(g_t, g_i, 2 * lam)
        if np.isfinite(b1):
            max_homog_err = max(max_homog_err, abs(b2 - 2 * b1) / max(1.0, abs(b1)))

    return {
        "first_order": first_order,
        "min_exponent": min(r["exponent"] for r in first_order),
        "holder_checked": holder_checked,
        "holder_violations": holder_violations,
        "projection_worst_residual": worst_resid,
        "projection_norm_growths": norm_grew,
        "homogeneity_max_error": max_homog_err,
    }


def _random_params(layout, rng) -> MlpParams:
    from .nn import init_params

    return init_params(layout, seed=int(rng.integers(1 << 31)))


def _toy_vec(values) -> GradVec:
    values = np.asarray(values, dtype=np.float64)
    return GradVec(
        values=values,
        index_set=RestrictedIndexSet(
            live=np.arange(len(values), dtype=np.int64),
            J=len(values), c=1, pruned_count=0,
        ),
    )


def empty_mask_for(params: MlpParams) -> FeatureMask:
    from .memory import empty_mask

    return empty_mask(params.weights[0].shape[0])


def verify_holder_bound(g_t: GradVec, g_i: GradVec, lam: float) -> BoundReport:
    """Check the per-step inequality sum_j g_i_j * lambda <= bound under the
    proof's preconditions (all current-gradient components <= 0 and the
    surrogate constraint holding). Reports skipped when preconditions fail."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if not g_t.index_set.compatible(g_i.index_set):
        raise ValueError("gradient vectors live on different restricted index sets")
    preconditions = bool(np.all(g_t.values <= 0.0)) and float(np.dot(g_t.values, g_i.values)) >= 0.0
    if not preconditions:
        return BoundReport(
            lam=lam, empirical_delta=0.0, first_order_sum=0.0,
            epsilon_bound=0.0, satisfied=False, skipped=True,
        )
    lhs = float(g_i.values.sum()) * lam
    rhs = epsilon_bound(g_t, g_i, lam)
    return BoundReport(
        lam=lam,
        empirical_delta=lhs,
        first_order_sum=lhs,
        epsilon_bound=rhs,
        satisfied=bound_satisfied(lhs, rhs),
    )
