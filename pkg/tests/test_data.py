import gzip
import struct

import numpy as np
import pytest

from smartcl.data import (
    CorruptionConfig,
    Dataset,
    batches,
    corrupt_labels,
    load_csv_stream,
    load_mnist_idx,
    make_disjoint_tasks,
)


def write_idx_files(tmp_path, images, labels, gz=False):
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    img_path = tmp_path / ("img.idx3.gz" if gz else "img.idx3")
    lbl_path = tmp_path / ("lbl.idx1.gz" if gz else "lbl.idx1")
    opener = gzip.open if gz else open
    with opener(img_path, "wb") as f:
        f.write(struct.pack(">iiii", 0x00000803, n, rows, cols))
        f.write(images.tobytes())
    with opener(lbl_path, "wb") as f:
        f.write(struct.pack(">ii", 0x00000801, len(labels)))
        f.write(labels.tobytes())
    return img_path, lbl_path


def synthetic_dataset(n_per_class=30, D=6, C=10, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(C), n_per_class)
    inputs = rng.random((len(labels), D))
    return Dataset(inputs=inputs, labels=labels, D=D, C=C)


class TestLoadMnistIdx:
    def test_roundtrip_small_file(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(7, 4, 5), dtype=np.uint8)
        labels = rng.integers(0, 10, size=7, dtype=np.uint8)
        img, lbl = write_idx_files(tmp_path, images, labels)
        ds = load_mnist_idx(img, lbl)
        assert ds.inputs.shape == (7, 20)
        assert ds.D == 20 and ds.C == 10
        np.testing.assert_array_equal(ds.labels, labels)
        np.testing.assert_allclose(ds.inputs, images.reshape(7, 20) / 255.0)

    def test_gzip_transparent(self, tmp_path):
        images = np.full((2, 3, 3), 255, dtype=np.uint8)
        img, lbl = write_idx_files(tmp_path, images, [1, 2], gz=True)
        ds = load_mnist_idx(img, lbl)
        assert np.all(ds.inputs == 1.0)  # pixel 255 -> exactly 1.0

    def test_count_mismatch(self, tmp_path):
        images = np.zeros((3, 2, 2), dtype=np.uint8)
        img, _ = write_idx_files(tmp_path, images, [0, 1, 2])
        # a label file with a different count
        lbl_path = tmp_path / "short.idx1"
        with open(lbl_path, "wb") as f:
            f.write(struct.pack(">ii", 0x00000801, 2))
            f.write(bytes([0, 1]))
        with pytest.raises(ValueError, match="mismatch"):
            load_mnist_idx(img, lbl_path)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.idx3"
        with open(p, "wb") as f:
            f.write(struct.pack(">iiii", 0xDEAD, 1, 2, 2))
            f.write(bytes(4))
        lbl = tmp_path / "ok.idx1"
        with open(lbl, "wb") as f:
            f.write(struct.pack(">ii", 0x00000801, 1))
            f.write(bytes(1))
        with pytest.raises(ValueError, match="magic"):
            load_mnist_idx(p, lbl)

    def test_truncated_data(self, tmp_path):
        p = tmp_path / "trunc.idx3"
        with open(p, "wb") as f:
            f.write(struct.pack(">iiii", 0x00000803, 5, 4, 4))
            f.write(bytes(10))  # far too short
        lbl = tmp_path / "l.idx1"
        with open(lbl, "wb") as f:
            f.write(struct.pack(">ii", 0x00000801, 5))
            f.write(bytes(5))
        with pytest.raises(ValueError, match="truncated"):
            load_mnist_idx(p, lbl)


class TestMakeDisjointTasks:
    def test_class_pairs_and_sizes(self):
        train = synthetic_dataset(n_per_class=120, seed=1)
        test = synthetic_dataset(n_per_class=15, seed=2)
        tasks = make_disjoint_tasks(train, test, seed=0, train_per_task=200)
        assert len(tasks) == 5
        all_classes = set()
        for t, expected_pair in zip(tasks, [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]):
            assert t.classes == expected_pair
            assert t.train_count == 200
            labels = train.labels[t.train_indices]
            assert set(labels) == set(expected_pair)
            # balanced draw
            assert (labels == expected_pair[0]).sum() == 100
            assert set(test.labels[t.test_indices]) == set(expected_pair)
            assert len(t.test_indices) == 30  # every test sample of the pair
            all_classes.update(expected_pair)
        assert all_classes == set(range(10))

    def test_deterministic_per_seed(self):
        train = synthetic_dataset(n_per_class=60, seed=3)
        test = synthetic_dataset(n_per_class=10, seed=4)
        a = make_disjoint_tasks(train, test, seed=5, train_per_task=100)
        b = make_disjoint_tasks(train, test, seed=5, train_per_task=100)
        c = make_disjoint_tasks(train, test, seed=6, train_per_task=100)
        for ta, tb in zip(a, b):
            np.testing.assert_array_equal(ta.train_indices, tb.train_indices)
        assert any(
            not np.array_equal(ta.train_indices, tc.train_indices) for ta, tc in zip(a, c)
        )

    def test_insufficient_samples(self):
        train = synthetic_dataset(n_per_class=10)
        test = synthetic_dataset(n_per_class=5)
        with pytest.raises(ValueError, match="only"):
            make_disjoint_tasks(train, test, seed=0, train_per_task=100)


class TestCorruptLabels:
    def test_ratio_zero_unchanged(self):
        labels = np.arange(10) % 3
        cfg = CorruptionConfig(ratio=0.0, seed=0, class_universe=(0, 1, 2))
        np.testing.assert_array_equal(corrupt_labels(labels, cfg), labels)

    def test_ratio_one_all_differ(self):
        labels = np.arange(50) % 2
        cfg = CorruptionConfig(ratio=1.0, seed=1, class_universe=(0, 1))
        out = corrupt_labels(labels, cfg)
        assert np.all(out != labels)

    def test_exact_flip_count(self):
        rng = np.random.default_rng(2)
        labels = rng.integers(0, 2, size=1000)
        cfg = CorruptionConfig(ratio=0.3, seed=3, class_universe=(0, 1))
        out = corrupt_labels(labels, cfg)
        assert (out != labels).sum() == 300

    def test_never_self_flip_and_universe_respected(self):
        rng = np.random.default_rng(4)
        for trial in range(100):
            n = int(rng.integers(5, 60))
            universe = tuple(rng.choice(10, size=rng.integers(2, 6), replace=False))
            labels = rng.choice(universe, size=n)
            ratio = float(rng.uniform(0, 1))
            cfg = CorruptionConfig(ratio=ratio, seed=trial, class_universe=universe)
            out = corrupt_labels(labels, cfg)
            changed = out != labels
            assert changed.sum() == int(round(ratio * n))
            assert np.all(np.isin(out[changed], universe))

    def test_deterministic(self):
        labels = np.arange(40) % 4
        cfg = CorruptionConfig(ratio=0.5, seed=9, class_universe=(0, 1, 2, 3))
        np.testing.assert_array_equal(corrupt_labels(labels, cfg), corrupt_labels(labels, cfg))

    def test_universe_too_small(self):
        with pytest.raises(ValueError):
            CorruptionConfig(ratio=0.1, seed=0, class_universe=(1,))


class TestLoadCsvStream:
    def write(self, tmp_path, text):
        p = tmp_path / "stream.csv"
        p.write_text(text)
        return p

    def test_two_tasks_three_rows(self, tmp_path):
        p = self.write(
            tmp_path,
            "task,label,f0,f1\n"
            "a,0,0.1,0.2\na,1,0.3,0.4\na,0,0.5,0.6\n"
            "b,1,0.7,0.8\nb,0,0.9,1.0\nb,1,0.15,0.25\n",
        )
        tasks, ds = load_csv_stream(p)
        assert len(tasks) == 2
        assert [t.train_count for t in tasks] == [3, 3]
        assert ds.D == 2 and len(ds.labels) == 6
        # stream ordered by first appearance
        assert tasks[0].task_id == 0
        np.testing.assert_array_equal(tasks[0].train_indices, [0, 1, 2])

    def test_empty_file_rejected(self, tmp_path):
        p = self.write(tmp_path, "")
        with pytest.raises(ValueError, match="empty"):
            load_csv_stream(p)

    def test_header_only_rejected(self, tmp_path):
        p = self.write(tmp_path, "task,label,f0\n")
        with pytest.raises(ValueError, match="no data rows"):
            load_csv_stream(p)

    def test_ragged_row_rejected(self, tmp_path):
        p = self.write(tmp_path, "task,label,f0,f1\na,0,0.1\n")
        with pytest.raises(ValueError, match="ragged"):
            load_csv_stream(p)

    def test_non_numeric_rejected(self, tmp_path):
        p = self.write(tmp_path, "task,label,f0\na,0,zebra\n")
        with pytest.raises(ValueError, match="non-numeric"):
            load_csv_stream(p)

    def test_write_read_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        values = rng.random((4, 3))
        lines = ["task,label,f0,f1,f2"]
        for i, row in enumerate(values):
            lines.append(f"t{i % 2},{i % 2}," + ",".join(repr(float(v)) for v in row))
        p = self.write(tmp_path, "\n".join(lines) + "\n")
        _, ds = load_csv_stream(p)
        order = [0, 2, 1, 3]  # rows regrouped by task? indices preserve file order
        np.testing.assert_array_equal(ds.inputs, values)


class TestBatches:
    def test_chunk_count(self):
        ds = synthetic_dataset(n_per_class=100, C=2)
        tasks = make_disjoint_tasks(ds, ds, seed=0, train_per_task=100, pairs=((0, 1),))
        bs = batches(tasks[0], ds, batch_size=10, seed=0)
        assert len(bs) == 10
        assert all(len(b.labels) == 10 for b in bs)

    def test_partial_final_chunk(self):
        ds = synthetic_dataset(n_per_class=101, C=2)
        tasks = make_disjoint_tasks(ds, ds, seed=0, train_per_task=101, pairs=((0, 1),))
        # train_per_task 101 -> 50 per class, so 100 samples; use explicit odd count
        t = tasks[0]
        t.train_indices = t.train_indices[:97]
        bs = batches(t, ds, batch_size=10, seed=0)
        assert [len(b.labels) for b in bs] == [10] * 9 + [7]

    def test_deterministic_and_permutation(self):
        ds = synthetic_dataset(n_per_class=50, C=2)
        tasks = make_disjoint_tasks(ds, ds, seed=1, train_per_task=80, pairs=((0, 1),))
        a = batches(tasks[0], ds, batch_size=16, seed=7)
        b = batches(tasks[0], ds, batch_size=16, seed=7)
        for ba, bb in zip(a, b):
            np.testing.assert_array_equal(ba.inputs, bb.inputs)
        # concatenation is a permutation of the task's training set
        seen = np.concatenate([x.inputs for x in a])
        want = ds.inputs[tasks[0].train_indices]
        assert sorted(map(tuple, seen)) == sorted(map(tuple, want))

    def test_bad_batch_size(self):
        ds = synthetic_dataset(n_per_class=30, C=2)
        tasks = make_disjoint_tasks(ds, ds, seed=0, train_per_task=40, pairs=((0, 1),))
        with pytest.raises(ValueError):
            batches(tasks[0], ds, batch_size=0, seed=0)
