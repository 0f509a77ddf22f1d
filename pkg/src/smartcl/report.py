"""Results emission and figure rendering.

Runs produce four delimited/JSON artifacts in the output directory
(results.csv, buffer_timeline.csv, bounds.jsonl, summary.json) and the report
path renders matplotlib figures next to them: buffer occupancy over the
stream, accuracy by configuration, and sweep curves when sweep data exists.
Floats are written as shortest round-trip decimals so identical runs emit
byte-identical rows (wall_s is the one nondeterministic column).
"""

from __future__ import annotations

import csv
import json
import os
from collections import defaultdict

import numpy as np

from .harness import Metrics

RESULTS_COLUMNS = [
    "method", "buffer", "corrupt", "alpha", "beta", "seed",
    "avg_acc", "multiclass_acc", "per_task_acc",
    "effective_samples_final", "used_units_final", "wall_s",
]

TIMELINE_COLUMNS = ["method", "seed", "batch", "effective_samples", "used_units"]

SWEEP_COLUMNS = ["param", "value", "corrupt", "seed", "avg_acc"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _group_key(m: Metrics) -> tuple:
    return (m.method, m.buffer, m.corrupt, m.alpha, m.beta, m.sweep_param, m.sweep_value)


def emit_results(metrics: list[Metrics], out_dir) -> dict:
    """Write results.csv, buffer_timeline.csv, bounds.jsonl and summary.json;
    returns the summary dict."""
    os.makedirs(out_dir, exist_ok=True)

    with open(os.path.join(out_dir, "results.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RESULTS_COLUMNS)
        for m in metrics:
            w.writerow([
                m.method, m.buffer, _fmt(float(m.corrupt)), _fmt(float(m.alpha)),
                _fmt(float(m.beta)), m.seed, _fmt(float(m.average_accuracy)),
                _fmt(float(m.multiclass_average)),
                ";".join(_fmt(float(a)) for a in m.per_task_accuracy),
                m.effective_samples_final, m.used_units_final, _fmt(float(m.wall_s)),
            ])

    with open(os.path.join(out_dir, "buffer_timeline.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TIMELINE_COLUMNS)
        for m in metrics:
            for batch, eff, units in m.buffer_timeline:
                w.writerow([m.method, m.seed, batch, eff, units])

    with open(os.path.join(out_dir, "bounds.jsonl"), "w") as f:
        for m in metrics:
            for r in m.bound_reports:
                record = {"method": m.method, "seed": m.seed}
                record.update(r.as_dict() if hasattr(r, "as_dict") else dict(r))
                f.write(json.dumps(record) + "\n")

    groups = defaultdict(list)
    for m in metrics:
        groups[_group_key(m)].append(m)
    summary = {}
    for key, ms in groups.items():
        method, buffer, corrupt, alpha, beta, sweep_param, sweep_value = key
        accs = np.array([m.average_accuracy for m in ms])
        per_task = np.array([m.per_task_accuracy for m in ms])
        name = f"method={method}|buffer={buffer}|corrupt={corrupt}|alpha={alpha}|beta={beta}"
        if sweep_param:
            name += f"|sweep={sweep_param}:{sweep_value}"
        summary[name] = {
            "n": len(ms),
            "mean_acc": float(accs.mean()),
            "std_acc": float(accs.std(ddof=1)) if len(ms) > 1 else 0.0,
            "per_task_mean": [float(x) for x in per_task.mean(axis=0)],
            "mean_effective_samples": float(np.mean([m.effective_samples_final for m in ms])),
            "seeds": [m.seed for m in ms],
        }
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return summary


def emit_sweep(metrics: list[Metrics], out_dir) -> None:
    """sweep.csv: one row per (swept parameter, value, corruption, seed)."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "sweep.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SWEEP_COLUMNS)
        for m in metrics:
            w.writerow([
                m.sweep_param, _fmt(float(m.sweep_value)), _fmt(float(m.corrupt)),
                m.seed, _fmt(float(m.average_accuracy)),
            ])


def render_figures(out_dir) -> list[str]:
    """Post-hoc figures from the emitted delimited files; returns the paths
    written."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    timeline_path = os.path.join(out_dir, "buffer_timeline.csv")
    results_path = os.path.join(out_dir, "results.csv")
    sweep_path = os.path.join(out_dir, "sweep.csv")

    if os.path.exists(timeline_path):
        rows = _read_csv(timeline_path)
        if rows:
            series = defaultdict(dict)  # method -> batch -> [eff]
            for r in rows:
                series[r["method"]].setdefault(int(r["batch"]), []).append(
                    int(r["effective_samples"])
                )
            fig, ax = plt.subplots(figsize=(7, 4))
            for method, per_batch in sorted(series.items()):
                xs = sorted(per_batch)
                ys = [np.mean(per_batch[b]) for b in xs]
                ax.plot(xs, ys, label=method)
            ax.set_xlabel("incoming batch")
            ax.set_ylabel("samples resident in buffer")
            ax.set_title("effective buffer occupancy over the stream")
            ax.legend()
            fig.tight_layout()
            path = os.path.join(out_dir, "buffer_timeline.png")
            fig.savefig(path, dpi=120)
            plt.close(fig)
            written.append(path)

    if os.path.exists(results_path):
        rows = _read_csv(results_path)
        if rows:
            groups = defaultdict(list)
            for r in rows:
                label = f"{r['method']}\nM={r['buffer']} c={float(r['corrupt']):g}"
                groups[label].append(float(r["avg_acc"]))
            labels = sorted(groups)
            means = [100 * np.mean(groups[k]) for k in labels]
            stds = [100 * (np.std(groups[k], ddof=1) if len(groups[k]) > 1 else 0.0) for k in labels]
            fig, ax = plt.subplots(figsize=(max(5, 1.3 * len(labels)), 4))
            ax.bar(range(len(labels)), means, yerr=stds, capsize=4)
            ax.set_xticks(range(len(labels)), labels, fontsize=8)
            ax.set_ylabel("average test accuracy (%)")
            ax.set_title("accuracy by configuration")
            fig.tight_layout()
            path = os.path.join(out_dir, "accuracy.png")
            fig.savefig(path, dpi=120)
            plt.close(fig)
            written.append(path)

    if os.path.exists(sweep_path):
        rows = _read_csv(sweep_path)
        if rows:
            fig, axes = plt.subplots(1, 2, figsize=(10, 4))
            for ax, param in zip(axes, ("alpha", "beta")):
                pts = defaultdict(list)
                for r in rows:
                    if r["param"] == param:
                        pts[float(r["value"])].append(float(r["avg_acc"]))
                if not pts:
                    ax.set_visible(False)
                    continue
                xs = sorted(pts)
                means = [100 * np.mean(pts[x]) for x in xs]
                stds = [100 * (np.std(pts[x], ddof=1) if len(pts[x]) > 1 else 0.0) for x in xs]
                ax.errorbar(xs, means, yerr=stds, marker="o", capsize=3)
                ax.set_xscale("log")
                ax.set_xlabel(param)
                ax.set_ylabel("average test accuracy (%)")
            fig.suptitle("regularization-factor sensitivity")
            fig.tight_layout()
            path = os.path.join(out_dir, "sweep.png")
            fig.savefig(path, dpi=120)
            plt.close(fig)
            written.append(path)

    return written


def _read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
