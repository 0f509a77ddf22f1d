"""Dataset ingestion and task-stream construction: MNIST IDX files (raw or
gzipped), a generic CSV task stream, disjoint class-pair task splits,
boundary-free batching, and label-corruption injection.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, D) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    D: int
    C: int

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels disagree on sample count")
        if len(self.inputs) == 0:
            raise ValueError("empty dataset")


@dataclass
class TaskSpec:
    task_id: int
    classes: tuple[int, ...]
    train_indices: np.ndarray  # into the train dataset
    test_indices: np.ndarray   # into the test dataset
    train_count: int = 0

    def __post_init__(self):
        self.train_count = len(self.train_indices)


@dataclass
class CorruptionConfig:
    ratio: float
    seed: int
    class_universe: tuple[int, ...]

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("corruption ratio must lie in [0, 1]")
        if len(self.class_universe) < 2:
            raise ValueError("corruption needs at least two classes to flip between")


def _open_maybe_gzip(path):
    f = open(path, "rb")
    head = f.read(2)
    f.seek(0)
    if head == b"\x1f\x8b":
        return gzip.open(f)
    return f


def load_mnist_idx(image_path, label_path) -> Dataset:
    """Parse big-endian IDX image/label files; pixels scaled by 1/255."""
    with _open_maybe_gzip(image_path) as f:
        header = f.read(16)
        if len(header) < 16:
            raise ValueError(f"truncated IDX image header in {image_path}")
        magic, n, rows, cols = struct.unpack(">iiii", header)
        if magic != IDX_IMAGE_MAGIC:
            raise ValueError(f"bad IDX image magic 0x{magic:08x} in {image_path}")
        raw = f.read(n * rows * cols)
        if len(raw) < n * rows * cols:
            raise ValueError(f"truncated IDX image data in {image_path}")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows * cols)
    with _open_maybe_gzip(label_path) as f:
        header = f.read(8)
        if len(header) < 8:
            raise ValueError(f"truncated IDX label header in {label_path}")
        magic, n_labels = struct.unpack(">ii", header)
        if magic != IDX_LABEL_MAGIC:
            raise ValueError(f"bad IDX label magic 0x{magic:08x} in {label_path}")
        raw = f.read(n_labels)
        if len(raw) < n_labels:
            raise ValueError(f"truncated IDX label data in {label_path}")
        labels = np.frombuffer(raw, dtype=np.uint8)
    if n != n_labels:
        raise ValueError(f"image/label count mismatch: {n} images vs {n_labels} labels")
    return Dataset(
        inputs=images.astype(np.float64) / 255.0,
        labels=labels.astype(np.int64),
        D=images.shape[1],
        C=10,
    )


DISJOINT_PAIRS = ((0, 1), (2, 3), (4, 5), (6, 7), (8, 9))


def make_disjoint_tasks(
    train: Dataset,
    test: Dataset,
    seed: int,
    train_per_task: int = 1000,
    pairs: tuple[tuple[int, ...], ...] = DISJOINT_PAIRS,
) -> list[TaskSpec]:
    """Class-pair tasks with balanced training draws and full test splits.

    Each task draws train_per_task // len(pair) samples per class uniformly
    without replacement (deterministic per seed); its test indices are every
    test-set sample of the task's classes.
    """
    rng = np.random.default_rng(seed)
    tasks = []
    for tid, pair in enumerate(pairs):
        per_class = train_per_task // len(pair)
        chosen = []
        for cls in pair:
            pool = np.nonzero(train.labels == cls)[0]
            if len(pool) < per_class:
                raise ValueError(
                    f"class {cls} has only {len(pool)} training samples, need {per_class}"
                )
            chosen.append(rng.choice(pool, size=per_class, replace=False))
        train_idx = np.sort(np.concatenate(chosen))
        test_idx = np.sort(np.nonzero(np.isin(test.labels, pair))[0])
        tasks.append(TaskSpec(task_id=tid, classes=tuple(pair),
                              train_indices=train_idx, test_indices=test_idx))
    return tasks


def corrupt_labels(labels: np.ndarray, cfg: CorruptionConfig) -> np.ndarray:
    """Replace exactly round(ratio * N) labels, chosen uniformly without
    replacement, with a different class drawn from the universe."""
    labels = np.asarray(labels, dtype=np.int64)
    out = labels.copy()
    n_flip = int(round(cfg.ratio * len(labels)))
    if n_flip == 0:
        return out
    rng = np.random.default_rng(cfg.seed)
    positions = rng.choice(len(labels), size=n_flip, replace=False)
    universe = np.asarray(cfg.class_universe, dtype=np.int64)
    for pos in positions:
        options = universe[universe != labels[pos]]
        if len(options) == 0:
            raise ValueError(f"no alternative class for label {labels[pos]} in universe")
        out[pos] = rng.choice(options)
    return out


def load_csv_stream(path, schema: list[str] | None = None) -> tuple[list[TaskSpec], Dataset]:
    """Generic task stream: header `task,label,f0,...`, one TaskSpec per
    distinct task value ordered by first appearance. Rows double as both the
    train and the evaluation split for their task."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"empty stream file {path}") from None
        expected = schema or ["task", "label"] + [f"f{i}" for i in range(len(header) - 2)]
        if [h.strip() for h in header] != expected:
            raise ValueError(f"unexpected header {header!r}, want {expected!r}")
        width = len(header)
        rows, labels, task_values = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ValueError(f"ragged row at line {lineno}: {len(row)} fields, want {width}")
            try:
                task_values.append(row[0].strip())
                labels.append(int(row[1]))
                rows.append([float(v) for v in row[2:]])
            except ValueError as e:
                raise ValueError(f"non-numeric value at line {lineno}: {e}") from None
    if not rows:
        raise ValueError(f"no data rows in {path}")
    inputs = np.asarray(rows, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    ds = Dataset(inputs=inputs, labels=labels, D=inputs.shape[1], C=int(labels.max()) + 1)

    order: list[str] = []
    for v in task_values:
        if v not in order:
            order.append(v)
    task_arr = np.asarray(task_values)
    tasks = []
    for tid, value in enumerate(order):
        idx = np.nonzero(task_arr == value)[0]
        classes = tuple(sorted(int(c) for c in np.unique(labels[idx])))
        tasks.append(TaskSpec(task_id=tid, classes=classes,
                              train_indices=idx, test_indices=idx))
    return tasks, ds


def batches(task: TaskSpec, ds: Dataset, batch_size: int, seed: int) -> list:
    """Shuffle the task's training samples per seed and chunk; the final
    partial chunk is kept."""
    from .nn import Batch

    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(task.train_indices)
    out = []
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        out.append(Batch(ds.inputs[idx], ds.labels[idx]))
    return out
