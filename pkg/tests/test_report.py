import csv
import json
import os

import numpy as np
import pytest

from smartcl.constraints import BoundReport
from smartcl.harness import Metrics
from smartcl.report import emit_results, emit_sweep, render_figures


def make_metric(seed, acc, method="smart", timeline=None, **kw):
    base = dict(
        method=method, seed=seed, buffer=300, corrupt=0.0, alpha=0.0005, beta=0.001,
        per_task_accuracy=[acc] * 5, average_accuracy=acc,
        multiclass_per_task=[acc * 0.9] * 5, multiclass_average=acc * 0.9,
        buffer_timeline=timeline or [(0, 10, 100), (1, 20, 200)],
        effective_samples_final=20, used_units_final=200, wall_s=1.25,
    )
    base.update(kw)
    return Metrics(**base)


class TestEmitResults:
    def test_ten_seeds_ten_rows_and_summary_std(self, tmp_path):
        rng = np.random.default_rng(0)
        accs = rng.uniform(0.8, 0.95, size=10)
        metrics = [make_metric(s, float(a)) for s, a in enumerate(accs)]
        summary = emit_results(metrics, tmp_path)

        with open(tmp_path / "results.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 10
        # summary mean/std match independent recomputation from emitted rows
        emitted = np.array([float(r["avg_acc"]) for r in rows])
        entry = next(iter(summary.values()))
        assert entry["n"] == 10
        assert entry["mean_acc"] == pytest.approx(emitted.mean(), abs=1e-15)
        assert entry["std_acc"] == pytest.approx(emitted.std(ddof=1), abs=1e-15)

        on_disk = json.loads((tmp_path / "summary.json").read_text())
        assert next(iter(on_disk.values()))["mean_acc"] == pytest.approx(emitted.mean())

    def test_empty_metrics_header_only(self, tmp_path):
        emit_results([], tmp_path)
        lines = (tmp_path / "results.csv").read_text().strip().split("\n")
        assert len(lines) == 1 and lines[0].startswith("method,")
        assert (tmp_path / "buffer_timeline.csv").read_text().strip().count("\n") == 0

    def test_rows_byte_identical_across_emissions(self, tmp_path):
        metrics = [make_metric(s, 0.9 + 0.001 * s) for s in range(3)]
        emit_results(metrics, tmp_path / "a")
        emit_results(metrics, tmp_path / "b")
        assert (tmp_path / "a" / "results.csv").read_bytes() == (
            tmp_path / "b" / "results.csv"
        ).read_bytes()

    def test_timeline_rows(self, tmp_path):
        metrics = [make_metric(0, 0.9, timeline=[(0, 5, 50), (1, 7, 70)])]
        emit_results(metrics, tmp_path)
        with open(tmp_path / "buffer_timeline.csv") as f:
            rows = list(csv.DictReader(f))
        assert [(r["batch"], r["effective_samples"], r["used_units"]) for r in rows] == [
            ("0", "5", "50"), ("1", "7", "70"),
        ]

    def test_bounds_jsonl(self, tmp_path):
        reports = [BoundReport(lam=0.1, empirical_delta=-0.5, first_order_sum=-0.49,
                               epsilon_bound=0.2, satisfied=True)]
        metrics = [make_metric(0, 0.9, bound_reports=reports)]
        emit_results(metrics, tmp_path)
        lines = (tmp_path / "bounds.jsonl").read_text().strip().split("\n")
        rec = json.loads(lines[0])
        assert rec["lambda"] == 0.1 and rec["satisfied"] is True and rec["seed"] == 0

    def test_groups_split_by_config(self, tmp_path):
        metrics = [make_metric(0, 0.9), make_metric(0, 0.7, method="gss")]
        summary = emit_results(metrics, tmp_path)
        assert len(summary) == 2


class TestSweepEmission:
    def test_rows(self, tmp_path):
        m = make_metric(0, 0.88)
        m.sweep_param, m.sweep_value = "alpha", 0.005
        emit_sweep([m], tmp_path)
        with open(tmp_path / "sweep.csv") as f:
            rows = list(csv.DictReader(f))
        assert rows[0]["param"] == "alpha"
        assert float(rows[0]["value"]) == 0.005
        assert float(rows[0]["avg_acc"]) == 0.88


class TestFigures:
    def test_renders_all_figures(self, tmp_path):
        metrics = [make_metric(s, 0.85 + 0.01 * s) for s in range(3)]
        for m in metrics[:2]:
            m.sweep_param, m.sweep_value = "alpha", 10.0 ** -(m.seed + 2)
        emit_results(metrics, tmp_path)
        emit_sweep(metrics[:2], tmp_path)
        written = render_figures(tmp_path)
        names = {os.path.basename(p) for p in written}
        assert names == {"buffer_timeline.png", "accuracy.png", "sweep.png"}
        for p in written:
            assert os.path.getsize(p) > 1000

    def test_no_csvs_no_figures(self, tmp_path):
        assert render_figures(tmp_path) == []
