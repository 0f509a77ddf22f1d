"""Experiment orchestration: the boundary-free replay training loop, the
GSS-greedy dense baseline, the regularizer-only ablation protocol, evaluation,
and multi-seed scheduling.

One run is one sequential training loop over the task stream. Per incoming
batch the loop snapshots the reference parameters, runs a fixed number of
optimizer iterations (projecting the restricted current gradient against the
replay reference gradient when they conflict, or jointly minimizing over
current plus replay, per config), derives the feature mask from first-layer
row norms, and offers the batch's samples to the budgeted buffer in sparse
form. Multiple (seed, config) runs execute in a worker pool; runs share no
mutable state and are deterministic per seed.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field, replace
from multiprocessing import get_context

import numpy as np

from .constraints import build_index_set, restrict
from .data import (
    CorruptionConfig,
    Dataset,
    TaskSpec,
    batches,
    corrupt_labels,
    load_csv_stream,
    load_mnist_idx,
    make_disjoint_tasks,
)
from .memory import ReplayBuffer, decode, derive_mask, empty_mask, encode
from .nn import (
    Batch,
    Gradients,
    MlpParams,
    adam_step,
    add_scaled,
    apply_input_mask,
    backward,
    cross_entropy,
    forward,
    init_adam,
    init_params,
    loss_and_grads,
)
from .regularizers import (
    SiAccumulator,
    ewc_importance,
    group_lasso,
    l2_importance,
    mas_importance,
    ncc_penalty,
    refresh_ncc_importance,
)

log = logging.getLogger(__name__)

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte.gz",
    "train_labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
}

ABLATION_VARIANTS = ("NONE", "L2", "EWC", "SI", "MAS", "NCC")

# Penalty strengths for the ablation variants, fixed by a coarse grid search
# over {1e-4 .. 1e2} on held-out seeds; see README.
DEFAULT_ABLATION_STRENGTH = {
    "NCC": 0.01,
    "L2": 0.001,
    "EWC": 1.0,
    "SI": 0.1,
    "MAS": 0.01,
    "NONE": 0.0,
}


class DivergedRunError(RuntimeError):
    """Training loss left the finite range; carries a diagnostic record."""

    def __init__(self, diagnostic: dict):
        super().__init__(f"run diverged: {diagnostic}")
        self.diagnostic = diagnostic


@dataclass
class RunConfig:
    dataset: str = "mnist"            # "mnist" | "csv:<path>"
    data_dir: str = "data/mnist"
    method: str = "smart"             # "smart" | "gss" | "ablation:<variant>"
    buffer: int = 300                 # nominal capacity in full samples
    alpha: float = 0.0005
    beta: float = 0.001
    epsilon: float = 1e-4
    lr: float = 1e-4
    batch_size: int = 50
    inner_iters: int = 100
    replay_batch: int = 50
    enforce: str = "project"          # "project" | "joint"
    ref_at: str = "prev"              # "prev" | "current"
    corrupt: float = 0.0
    corrupt_universe: str = "pair"    # "pair" | "global"
    seeds: tuple = tuple(range(10))
    refresh_every: int = 1
    eval_mode: str = "pair"           # "pair" | "multiclass"
    out_dir: str = "out"
    hidden: tuple = (400, 400)
    train_per_task: int = 1000
    budget_mode: str = "units"        # "units" | "count"
    gss_k: int = 10
    output_importance: str = "transpose"  # | "uniform"
    ablation_epochs: int = 4
    ablation_batch: int = 128
    ablation_strength: float = 0.0    # 0 -> per-variant default
    si_damping: float = 1e-3
    gss_score_grads: str = "batch"    # "batch" | "sample" | "sample_prev"
    workers: int = 0                  # 0 -> one per seed, capped at cpu count

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if self.enforce not in ("project", "joint"):
            raise ValueError(f"unknown enforcement mode {self.enforce!r}")
        if self.eval_mode not in ("pair", "multiclass"):
            raise ValueError(f"unknown eval mode {self.eval_mode!r}")
        if self.ref_at not in ("prev", "current"):
            raise ValueError(f"unknown reference point {self.ref_at!r}")
        if self.method.startswith("ablation:"):
            variant = self.method.split(":", 1)[1]
            if variant not in ABLATION_VARIANTS:
                raise ValueError(f"unknown ablation variant {variant!r}")
        elif self.method not in ("smart", "gss"):
            raise ValueError(f"unknown method {self.method!r}")
        for name in ("buffer", "batch_size", "inner_iters", "replay_batch",
                     "train_per_task", "ablation_epochs", "ablation_batch"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class Metrics:
    method: str
    seed: int
    buffer: int
    corrupt: float
    alpha: float
    beta: float
    per_task_accuracy: list
    average_accuracy: float
    multiclass_per_task: list
    multiclass_average: float
    buffer_timeline: list = field(default_factory=list)  # (batch, effective, used_units)
    effective_samples_final: int = 0
    used_units_final: int = 0
    bound_reports: list = field(default_factory=list)
    wall_s: float = 0.0
    variant: str = ""
    sweep_param: str = ""
    sweep_value: float = 0.0
    initial_train_loss: float = 0.0
    final_train_loss: float = 0.0
    final_label_counts: dict = field(default_factory=dict)


_DATASET_CACHE: dict = {}


def load_dataset(cfg: RunConfig):
    """Tasks plus train/test datasets for the configured source (cached per
    process)."""
    key = (cfg.dataset, cfg.data_dir, cfg.train_per_task)
    if key in _DATASET_CACHE:
        return _DATASET_CACHE[key]
    if cfg.dataset == "mnist":
        d = cfg.data_dir
        train = load_mnist_idx(
            _find_idx(d, MNIST_FILES["train_images"]), _find_idx(d, MNIST_FILES["train_labels"])
        )
        test = load_mnist_idx(
            _find_idx(d, MNIST_FILES["test_images"]), _find_idx(d, MNIST_FILES["test_labels"])
        )
        tasks = None  # per-seed task draws happen in the run
        _DATASET_CACHE[key] = (tasks, train, test)
    elif cfg.dataset.startswith("csv:"):
        tasks, ds = load_csv_stream(cfg.dataset[4:])
        _DATASET_CACHE[key] = (tasks, ds, ds)
    else:
        raise ValueError(f"unknown dataset spec {cfg.dataset!r}")
    return _DATASET_CACHE[key]


def _find_idx(directory, name):
    """Accept both gzipped and raw IDX file names."""
    path = os.path.join(directory, name)
    if os.path.exists(path):
        return path
    raw = path[:-3] if path.endswith(".gz") else path
    if os.path.exists(raw):
        return raw
    raise FileNotFoundError(f"dataset file {name} (or ungzipped variant) not found in {directory}")


def _build_stream(cfg: RunConfig, seed: int):
    """Resolve tasks and a (possibly label-corrupted) training dataset."""
    tasks, train, test = load_dataset(cfg)
    if tasks is None:
        tasks = make_disjoint_tasks(
            train, test, seed=seed, train_per_task=cfg.train_per_task
        )
    if cfg.corrupt > 0.0:
        labels = train.labels.copy()
        for task in tasks:
            universe = task.classes if cfg.corrupt_universe == "pair" else tuple(range(train.C))
            sub_seed = int(np.random.SeedSequence([seed, 3, task.task_id]).generate_state(1)[0])
            ccfg = CorruptionConfig(ratio=cfg.corrupt, seed=sub_seed, class_universe=universe)
            idx = task.train_indices
            labels[idx] = corrupt_labels(labels[idx], ccfg)
        train = Dataset(inputs=train.inputs, labels=labels, D=train.D, C=train.C)
    return tasks, train, test


def evaluate(params: MlpParams, tasks: list[TaskSpec], test_ds: Dataset):
    """Per-task accuracy over each task's full test split.

    Pair mode restricts the argmax to the task's own class columns;
    multiclass takes the full argmax. Both are computed and returned as
    (pair_per_task, pair_avg, multi_per_task, multi_avg)."""
    pair_acc, multi_acc = [], []
    for task in tasks:
        x = test_ds.inputs[task.test_indices]
        y = test_ds.labels[task.test_indices]
        logits, _ = forward(params, x)
        cols = np.asarray(task.classes)
        pred_pair = cols[np.argmax(logits[:, cols], axis=1)]
        pair_acc.append(float((pred_pair == y).mean()))
        pred_multi = np.argmax(logits, axis=1)
        multi_acc.append(float((pred_multi == y).mean()))
    return pair_acc, float(np.mean(pair_acc)), multi_acc, float(np.mean(multi_acc))


def _block_dot(a: Gradients, b: Gradients) -> float:
    s = 0.0
    for x, y in zip(a.weights, b.weights):
        s += float(np.vdot(x, y))
    for x, y in zip(a.biases, b.biases):
        s += float(np.vdot(x, y))
    return s


def _block_axpy(dst: Gradients, src: Gradients, scale: float) -> None:
    for d, s in zip(dst.weights, src.weights):
        d += scale * s
    for d, s in zip(dst.biases, src.biases):
        d += scale * s


def decode_batch(samples, D: int) -> Batch:
    inputs = np.zeros((len(samples), D))
    labels = np.empty(len(samples), dtype=np.int64)
    for i, s in enumerate(samples):
        inputs[i, s.indices] = s.values
        labels[i] = s.label
    return Batch(inputs, labels)


def _make_grad_of(params: MlpParams, mask, index_set, D: int,
                  batch_vec=None, candidate_ids=None):
    """Scoring callback: loss gradient of one decoded sample, restricted to
    the live set.

    When a batch-level gradient is supplied, candidates from the incoming
    batch (recognized by identity) all score with it; resident samples are
    always scored individually. Batch-level candidate directions are far less
    noisy near convergence and keep redundant batches out of the buffer."""

    def grad_of(sample):
        if candidate_ids is not None and id(sample) in candidate_ids:
            return batch_vec
        b = Batch(decode(sample, D)[None, :], np.array([sample.label]))
        _, grads = loss_and_grads(params, b)
        return restrict(grads, mask, index_set)

    return grad_of


def _stream_train_loss(params: MlpParams, tasks, train: Dataset) -> float:
    idx = np.concatenate([t.train_indices for t in tasks])
    logits, _ = forward(params, train.inputs[idx])
    return cross_entropy(logits, train.labels[idx])


def _run_replay(cfg: RunConfig, seed: int, smart: bool) -> Metrics:
    t0 = time.perf_counter()
    tasks, train, test = _build_stream(cfg, seed)
    D, C = train.D, train.C
    layout = (D, *cfg.hidden, C)
    params = init_params(layout, seed)
    adam = init_adam(params)
    initial_train_loss = _stream_train_loss(params, tasks, train)

    rng_replay = np.random.default_rng([seed, 1])
    rng_gss = np.random.default_rng([seed, 2])

    budget = cfg.buffer * D if cfg.budget_mode == "units" else cfg.buffer
    buffer = ReplayBuffer(budget_units=budget, count_mode=(cfg.budget_mode == "count"))

    alpha = cfg.alpha if smart else 0.0
    beta = cfg.beta if smart else 0.0
    enforce = cfg.enforce if smart else "joint"
    mask = derive_mask(params.weights[0], cfg.epsilon) if smart else empty_mask(D, cfg.epsilon)
    index_set = build_index_set(params, mask)

    snapshot = params
    importance = refresh_ncc_importance(params, cfg.output_importance) if beta > 0 else None

    timeline = []
    worst_post_dot = 0.0
    batch_no = 0
    method = "smart" if smart else "gss"

    for task in tasks:
        task_seed = int(np.random.SeedSequence([seed, 4, task.task_id]).generate_state(1)[0])
        for batch in batches(task, train, cfg.batch_size, task_seed):
            params_prev = params
            if beta > 0 and batch_no % cfg.refresh_every == 0:
                importance = refresh_ncc_importance(params, cfg.output_importance)
                snapshot = params
            masked_inputs = apply_input_mask(batch.inputs, mask) if smart else batch.inputs

            for it in range(cfg.inner_iters):
                replay = (
                    buffer.sample_replay(cfg.replay_batch, rng_replay) if len(buffer) else []
                )
                if enforce == "project":
                    cur = Batch(masked_inputs, batch.labels)
                    logits, cache = forward(params, cur.inputs)
                    loss = cross_entropy(logits, cur.labels)
                    grads = backward(params, cur, cache)
                    if replay:
                        rb = decode_batch(replay, D)
                        ref_params = params_prev if cfg.ref_at == "prev" else params
                        rx = apply_input_mask(rb.inputs, mask)
                        rlogits, rcache = forward(ref_params, rx)
                        g_ref = backward(ref_params, Batch(rx, rb.labels), rcache)
                        dot = _block_dot(grads, g_ref)
                        if dot < 0.0:
                            denom = _block_dot(g_ref, g_ref)
                            if denom > 0.0:
                                scale = np.sqrt(_block_dot(grads, grads) * denom)
                                _block_axpy(grads, g_ref, -dot / denom)
                                post = _block_dot(grads, g_ref)
                                if scale > 0 and post < -1e-9 * scale:
                                    log.error("post-projection dot %.3e below tolerance", post)
                                worst_post_dot = min(worst_post_dot, post)
                else:
                    if replay:
                        rb = decode_batch(replay, D)
                        joint = Batch(
                            np.vstack([batch.inputs, rb.inputs]),
                            np.concatenate([batch.labels, rb.labels]),
                        )
                    else:
                        joint = batch
                    loss, grads = loss_and_grads(params, joint)

                if not np.isfinite(loss):
                    raise DivergedRunError(
                        {"method": method, "seed": seed, "batch": batch_no,
                         "iteration": it, "loss": float(loss)}
                    )
                if alpha > 0.0:
                    _, sub = group_lasso(params.weights[0])
                    grads.weights[0] += alpha * sub
                if beta > 0.0:
                    _, g_pen = ncc_penalty(params, snapshot, importance)
                    add_scaled(grads, g_pen, beta)
                params, adam = adam_step(params, grads, adam, cfg.lr)

            if smart:
                mask = derive_mask(params.weights[0], cfg.epsilon)
                index_set = build_index_set(params, mask)
            mid = buffer.intern_mask(mask)
            score_params = params_prev if cfg.gss_score_grads == "sample_prev" else params
            candidates = [encode(x, y, mask, mid) for x, y in zip(batch.inputs, batch.labels)]
            if cfg.gss_score_grads == "batch":
                _, bg = loss_and_grads(score_params, batch)
                batch_vec = restrict(bg, mask, index_set)
                grad_of = _make_grad_of(score_params, mask, index_set, D,
                                        batch_vec=batch_vec,
                                        candidate_ids={id(c) for c in candidates})
            else:
                grad_of = _make_grad_of(score_params, mask, index_set, D)
            for candidate in candidates:
                buffer.offer(candidate, grad_of, rng_gss, k=cfg.gss_k)

            st = buffer.stats()
            timeline.append((batch_no, st.effective_samples, st.used_units))
            batch_no += 1
        log.info(
            "%s seed=%d task=%d done: buffer holds %d samples / %d units",
            method, seed, task.task_id, len(buffer), buffer.used_units,
        )

    pair_acc, pair_avg, multi_acc, multi_avg = evaluate(params, tasks, test)
    avg = pair_avg if cfg.eval_mode == "pair" else multi_avg
    if worst_post_dot < 0.0:
        log.debug("worst post-projection dot over run: %.3e", worst_post_dot)
    return Metrics(
        method=method, seed=seed, buffer=cfg.buffer, corrupt=cfg.corrupt,
        alpha=alpha, beta=beta,
        per_task_accuracy=pair_acc, average_accuracy=avg,
        multiclass_per_task=multi_acc, multiclass_average=multi_avg,
        buffer_timeline=timeline,
        effective_samples_final=timeline[-1][1] if timeline else 0,
        used_units_final=timeline[-1][2] if timeline else 0,
        wall_s=time.perf_counter() - t0,
        initial_train_loss=initial_train_loss,
        final_train_loss=_stream_train_loss(params, tasks, train),
        final_label_counts=buffer.stats().per_task_counts,
    )


def run_smart(cfg: RunConfig, seed: int) -> Metrics:
    return _run_replay(cfg, seed, smart=True)


def run_gss_greedy_baseline(cfg: RunConfig, seed: int) -> Metrics:
    """Identical loop with no sparsity, no regularizers, no restriction:
    dense storage and joint minimization over current plus replay."""
    return _run_replay(cfg, seed, smart=False)


def run_ablation(cfg: RunConfig, seed: int, variant: str | None = None) -> Metrics:
    """Regularizer-only continual training: no replay buffer, a fixed number
    of epochs per task, penalties refreshed at task boundaries."""
    t0 = time.perf_counter()
    if variant is None:
        variant = cfg.method.split(":", 1)[1]
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}")
    strength = cfg.ablation_strength or DEFAULT_ABLATION_STRENGTH[variant]

    tasks, train, test = _build_stream(cfg, seed)
    layout = (train.D, *cfg.hidden, train.C)
    params = init_params(layout, seed)
    adam = init_adam(params)
    snapshot = params
    importance = None
    si = SiAccumulator(params, damping=cfg.si_damping) if variant == "SI" else None

    for task in tasks:
        for epoch in range(cfg.ablation_epochs):
            ep_seed = int(
                np.random.SeedSequence([seed, 5, task.task_id, epoch]).generate_state(1)[0]
            )
            for it, batch in enumerate(batches(task, train, cfg.ablation_batch, ep_seed)):
                loss, grads = loss_and_grads(params, batch)
                if not np.isfinite(loss):
                    raise DivergedRunError(
                        {"method": f"ablation:{variant}", "seed": seed,
                         "task": task.task_id, "epoch": epoch, "loss": float(loss)}
                    )
                data_grads = grads.copy() if si is not None else None
                if importance is not None and strength > 0.0:
                    _, g_pen = ncc_penalty(params, snapshot, importance)
                    add_scaled(grads, g_pen, strength)
                new_params, adam = adam_step(params, grads, adam, cfg.lr)
                if si is not None:
                    si.update(data_grads, params, new_params)
                params = new_params

        # task boundary: refresh what the variant consolidates
        if variant == "NCC":
            importance = refresh_ncc_importance(params, cfg.output_importance)
        elif variant == "L2":
            importance = l2_importance(params)
        elif variant == "EWC":
            fisher = ewc_importance(
                params, batches(task, train, cfg.ablation_batch,
                                int(np.random.SeedSequence([seed, 6, task.task_id]).generate_state(1)[0]))
            )
            importance = _accumulate(importance, fisher)
        elif variant == "MAS":
            mas = mas_importance(params, train.inputs[task.train_indices])
            importance = _accumulate(importance, mas)
        elif variant == "SI":
            si.finalize_task(params)
            importance = si.importance()
        snapshot = params

    pair_acc, pair_avg, multi_acc, multi_avg = evaluate(params, tasks, test)
    avg = pair_avg if cfg.eval_mode == "pair" else multi_avg
    return Metrics(
        method=f"ablation:{variant}", seed=seed, buffer=0, corrupt=cfg.corrupt,
        alpha=0.0, beta=strength,
        per_task_accuracy=pair_acc, average_accuracy=avg,
        multiclass_per_task=multi_acc, multiclass_average=multi_avg,
        wall_s=time.perf_counter() - t0, variant=variant,
    )


def _accumulate(total, fresh):
    if total is None:
        return fresh
    for t, f in zip(total.weights, fresh.weights):
        t += f
    if total.biases is not None and fresh.biases is not None:
        for t, f in zip(total.biases, fresh.biases):
            t += f
    return total


def run_one(cfg: RunConfig, seed: int) -> Metrics:
    if cfg.method == "smart":
        return run_smart(cfg, seed)
    if cfg.method == "gss":
        return run_gss_greedy_baseline(cfg, seed)
    return run_ablation(cfg, seed)


def _pool_worker(args):
    cfg, seed = args
    return run_one(cfg, seed)


def run_many(cfg: RunConfig) -> list[Metrics]:
    """One run per seed, scheduled over a process pool when it pays off."""
    jobs = [(cfg, seed) for seed in cfg.seeds]
    workers = cfg.workers or min(len(jobs), os.cpu_count() or 1)
    if workers <= 1 or len(jobs) == 1:
        return [run_one(c, s) for c, s in jobs]
    with get_context("fork").Pool(workers) as pool:
        return pool.map(_pool_worker, jobs)


def run_job_list(jobs: list[tuple[RunConfig, int]], workers: int = 0) -> list[Metrics]:
    """Schedule heterogeneous (config, seed) jobs over one pool."""
    workers = workers or min(len(jobs), os.cpu_count() or 1)
    if workers <= 1 or len(jobs) == 1:
        return [run_one(c, s) for c, s in jobs]
    with get_context("fork").Pool(workers) as pool:
        return pool.map(_pool_worker, jobs)


def sensitivity_sweep(cfg: RunConfig, alphas: list[float], betas: list[float]) -> list[Metrics]:
    """One run per seed per grid value: the alpha grid holds beta at the
    config value and vice versa. Results are tagged with the swept parameter."""
    jobs, tags = [], []
    for a in alphas:
        for seed in cfg.seeds:
            jobs.append((replace(cfg, alpha=a, method="smart"), seed))
            tags.append(("alpha", a))
    for b in betas:
        for seed in cfg.seeds:
            jobs.append((replace(cfg, beta=b, method="smart"), seed))
            tags.append(("beta", b))
    results = run_job_list(jobs, cfg.workers)
    for m, (param, value) in zip(results, tags):
        m.sweep_param = param
        m.sweep_value = value
    return results
