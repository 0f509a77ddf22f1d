"""Schematic replay memory: feature-mask derivation, sparse sample encoding,
a unit-budgeted buffer, and gradient-similarity greedy admission.

The buffer's capacity is counted in scalar storage units (nominal sample
count x feature count), so sparse samples cost less than dense ones and the
number of resident samples can exceed the nominal cap. Admission and
eviction follow a greedy gradient-diversity rule: a candidate's score is one
plus the maximum cosine similarity between its loss gradient and the
gradients of a few randomly drawn resident samples, and on overflow victims
are drawn with probability proportional to score, each of which must score
strictly higher than the candidate or the candidate is rejected.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class FeatureMask:
    """Set of pruned input-feature indices over D features."""

    D: int
    pruned: np.ndarray  # sorted int64 indices
    epsilon: float

    def __post_init__(self):
        self.pruned = np.asarray(self.pruned, dtype=np.int64)

    @property
    def n_pruned(self) -> int:
        return int(len(self.pruned))

    @property
    def live(self) -> np.ndarray:
        keep = np.ones(self.D, dtype=bool)
        keep[self.pruned] = False
        return np.nonzero(keep)[0]

    def same_pruning(self, other: "FeatureMask") -> bool:
        return self.D == other.D and np.array_equal(self.pruned, other.pruned)


def empty_mask(D: int, epsilon: float = 0.0) -> FeatureMask:
    return FeatureMask(D=D, pruned=np.array([], dtype=np.int64), epsilon=epsilon)


def derive_mask(W1: np.ndarray, epsilon: float) -> FeatureMask:
    """Prune feature d iff the L2 norm of first-layer weight row d is < epsilon."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    norms = np.sqrt((np.asarray(W1, dtype=np.float64) ** 2).sum(axis=1))
    pruned = np.nonzero(norms < epsilon)[0].astype(np.int64)
    return FeatureMask(D=W1.shape[0], pruned=pruned, epsilon=epsilon)


@dataclass
class SparseSample:
    """Retained (index, value) pairs of one sample plus its label.

    cost is the number of stored values, i.e. D minus the pruned count of the
    mask in force at storage time.
    """

    indices: np.ndarray  # sorted int64 live-feature indices
    values: np.ndarray   # float64, one per index
    label: int
    mask_id: int
    cost: int


def encode(x: np.ndarray, y: int, mask: FeatureMask, mask_id: int = 0) -> SparseSample:
    """Keep only live-feature entries of a dense vector."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) != mask.D:
        raise ValueError(f"vector of length {len(x)} does not match mask over {mask.D} features")
    live = mask.live
    return SparseSample(
        indices=live.copy(),
        values=x[live].copy(),
        label=int(y),
        mask_id=mask_id,
        cost=int(len(live)),
    )


def decode(s: SparseSample, D: int) -> np.ndarray:
    """Dense vector with stored values at their indices and zeros elsewhere."""
    if len(s.indices) and s.indices.max() >= D:
        raise ValueError("sample indices exceed feature count")
    out = np.zeros(D)
    out[s.indices] = s.values
    return out


@dataclass
class BufferStats:
    effective_samples: int
    used_units: int
    budget_units: int
    per_task_counts: dict
    occupancy: float


@dataclass
class ReplayBuffer:
    """Budgeted store of sparse samples with greedy gradient-diversity admission.

    budget_units: total scalar slots (nominal capacity x D for unit accounting).
    count_mode: if True, capacity is a plain sample count and every sample
    costs one unit regardless of sparsity.
    """

    budget_units: int
    count_mode: bool = False
    entries: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    masks: dict = field(default_factory=dict)
    _next_mask_id: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def intern_mask(self, mask: FeatureMask) -> int:
        """Return a stable id for this pruning pattern, registering it if new."""
        for mid, known in self.masks.items():
            if known.same_pruning(mask):
                return mid
        mid = self._next_mask_id
        self._next_mask_id += 1
        self.masks[mid] = mask
        return mid

    def entry_cost(self, s: SparseSample) -> int:
        return 1 if self.count_mode else s.cost

    @property
    def used_units(self) -> int:
        return sum(self.entry_cost(e) for e in self.entries)

    def offer(
        self,
        candidate: SparseSample,
        grad_of: Callable[[SparseSample], "object"],
        rng: np.random.Generator,
        k: int = 10,
    ) -> bool:
        """Greedy admission: score the candidate by gradient similarity, insert
        if the budget allows, otherwise evict score-proportional victims that
        each out-score the candidate, or reject."""
        cost = self.entry_cost(candidate)
        if cost > self.budget_units:
            log.warning("candidate cost %d exceeds total budget %d; rejected", cost, self.budget_units)
            return False

        if self.entries:
            draw = rng.choice(len(self.entries), size=min(k, len(self.entries)), replace=False)
            g_cand = grad_of(candidate).values
            best = -1.0
            for idx in draw:
                g_other = grad_of(self.entries[idx]).values
                best = max(best, _cosine(g_cand, g_other))
            score = 1.0 + best
        else:
            score = 0.0

        used = self.used_units
        if used + cost <= self.budget_units:
            self.entries.append(candidate)
            self.scores.append(score)
            return True

        # overflow: pick victims proportionally to score, atomically
        victims: list[int] = []
        freed = 0
        remaining = list(range(len(self.entries)))
        while used - freed + cost > self.budget_units:
            if not remaining:
                return False
            weights = np.array([self.scores[i] for i in remaining])
            total = weights.sum()
            probs = weights / total if total > 0 else None
            pick = int(rng.choice(len(remaining), p=probs))
            victim = remaining.pop(pick)
            if not score < self.scores[victim]:
                return False
            victims.append(victim)
            freed += self.entry_cost(self.entries[victim])

        for i in sorted(victims, reverse=True):
            del self.entries[i]
            del self.scores[i]
        self.entries.append(candidate)
        self.scores.append(score)
        return True

    def sample_replay(self, n: int, rng: np.random.Generator) -> list[SparseSample]:
        """Uniform draws without replacement; when n exceeds the resident
        count, every entry appears once and the excess is drawn with
        replacement."""
        if not self.entries or n <= 0:
            return []
        if n <= len(self.entries):
            idx = rng.choice(len(self.entries), size=n, replace=False)
        else:
            extra = rng.choice(len(self.entries), size=n - len(self.entries), replace=True)
            idx = np.concatenate([rng.permutation(len(self.entries)), extra])
        return [self.entries[i] for i in idx]

    def stats(self) -> BufferStats:
        used = self.used_units
        counts: dict[int, int] = {}
        for e in self.entries:
            counts[e.label] = counts.get(e.label, 0) + 1
        return BufferStats(
            effective_samples=len(self.entries),
            used_units=used,
            budget_units=self.budget_units,
            per_task_counts=counts,
            occupancy=used / self.budget_units if self.budget_units else 0.0,
        )

    def save(self, path) -> None:
        """Snapshot to the newline-delimited SMARTBUF v1 format."""
        D = max((m.D for m in self.masks.values()), default=0)
        lines = [f"SMARTBUF v1 D={D} budget={self.budget_units}"]
        for e in self.entries:
            pairs = ",".join(f"{i}:{float(v)!r}" for i, v in zip(e.indices, e.values))
            lines.append(f"{e.mask_id};{e.label};{pairs}")
        for mid, m in sorted(self.masks.items()):
            pruned = ",".join(str(i) for i in m.pruned)
            lines.append(f"MASK {mid} eps={float(m.epsilon)!r} pruned={pruned}")
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        """Restore a snapshot. Admission scores are not persisted by the format
        and come back as zero."""
        with open(path) as f:
            lines = [ln.rstrip("\n") for ln in f if ln.strip()]
        header = lines[0].split()
        if header[:2] != ["SMARTBUF", "v1"]:
            raise ValueError(f"not a SMARTBUF v1 snapshot: {lines[0]!r}")
        fields = dict(part.split("=", 1) for part in header[2:])
        buf = cls(budget_units=int(fields["budget"]))
        masks: dict[int, FeatureMask] = {}
        D = int(fields["D"])
        for ln in lines[1:]:
            if ln.startswith("MASK "):
                _, mid, eps_part, pruned_part = ln.split(" ", 3)
                eps = float(eps_part.split("=", 1)[1])
                plist = pruned_part.split("=", 1)[1]
                pruned = np.array([int(x) for x in plist.split(",") if x], dtype=np.int64)
                masks[int(mid)] = FeatureMask(D=D, pruned=pruned, epsilon=eps)
            else:
                mid, label, pairs = ln.split(";", 2)
                if pairs:
                    idx, vals = zip(*(p.split(":", 1) for p in pairs.split(",")))
                    indices = np.array([int(i) for i in idx], dtype=np.int64)
                    values = np.array([float(v) for v in vals])
                else:
                    indices = np.array([], dtype=np.int64)
                    values = np.array([])
                buf.entries.append(
                    SparseSample(indices=indices, values=values, label=int(label),
                                 mask_id=int(mid), cost=int(len(indices)))
                )
                buf.scores.append(0.0)
        buf.masks = masks
        buf._next_mask_id = max(masks, default=-1) + 1
        return buf


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))
