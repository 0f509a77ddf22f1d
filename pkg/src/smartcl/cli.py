"""Batch-oriented command line: `smart run`, `smart sweep`,
`smart verify-bounds`, and `smart report`.

Every flag can also be supplied through a key=value config file
(--config path); explicit flags win over the file. Exit codes: 0 success,
1 config or I/O error, 2 diverged run.
"""

from __future__ import annotations

import os

# pin BLAS threading before numpy loads: runs parallelize across seeds via a
# process pool, and a fixed thread count keeps reductions deterministic
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import logging
import sys
from dataclasses import fields

log = logging.getLogger("smart")


def parse_seeds(text: str) -> tuple:
    """Accept `0..9`, `3`, or `0,2,5`."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return tuple(range(int(lo), int(hi) + 1))
    if "," in text:
        return tuple(int(t) for t in text.split(",") if t.strip())
    return (int(text),)


def parse_grid(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def read_config_file(path: str) -> dict:
    """key=value lines; `#` starts a comment; keys use flag names with
    dashes or underscores."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--dataset", help="mnist | csv:<path>")
    p.add_argument("--data-dir", dest="data_dir", help="directory holding the MNIST IDX files")
    p.add_argument("--method", help="smart | gss | ablation:<NONE|L2|EWC|SI|MAS|NCC>")
    p.add_argument("--buffer", type=int, help="nominal buffer capacity in full samples")
    p.add_argument("--alpha", type=float, help="group-sparsity factor")
    p.add_argument("--beta", type=float, help="consolidation factor")
    p.add_argument("--epsilon", type=float, help="feature-pruning threshold")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--inner-iters", dest="inner_iters", type=int)
    p.add_argument("--replay-batch", dest="replay_batch", type=int)
    p.add_argument("--enforce", choices=["project", "joint"])
    p.add_argument("--ref-at", dest="ref_at", choices=["prev", "current"])
    p.add_argument("--corrupt", type=float, help="training-label corruption ratio")
    p.add_argument("--corrupt-universe", dest="corrupt_universe", choices=["pair", "global"])
    p.add_argument("--seeds", help="e.g. 0..9 or 0,1,2")
    p.add_argument("--refresh-every", dest="refresh_every", type=int)
    p.add_argument("--eval", dest="eval_mode", choices=["pair", "multiclass"])
    p.add_argument("--out", dest="out_dir", help="output directory")
    p.add_argument("--budget-mode", dest="budget_mode", choices=["units", "count"])
    p.add_argument("--train-per-task", dest="train_per_task", type=int)
    p.add_argument("--gss-k", dest="gss_k", type=int)
    p.add_argument("--ablation-epochs", dest="ablation_epochs", type=int)
    p.add_argument("--ablation-batch", dest="ablation_batch", type=int)
    p.add_argument("--ablation-strength", dest="ablation_strength", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")


def build_config(args: argparse.Namespace):
    from .harness import RunConfig

    merged: dict = {}
    if getattr(args, "config", None):
        merged.update(read_config_file(args.config))
    valid = {f.name: f.type for f in fields(RunConfig)}
    kwargs = {}
    for key, raw in merged.items():
        if key not in valid:
            raise ValueError(f"unknown config key {key!r}")
        kwargs[key] = _coerce(key, raw)
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            kwargs[f.name] = value
    if "seeds" in kwargs and isinstance(kwargs["seeds"], str):
        kwargs["seeds"] = parse_seeds(kwargs["seeds"])
    return RunConfig(**kwargs)


def _coerce(key: str, raw: str):
    if key == "seeds":
        return parse_seeds(raw)
    if key == "hidden":
        return tuple(int(t) for t in raw.split(",") if t.strip())
    int_keys = {"buffer", "batch_size", "inner_iters", "replay_batch", "refresh_every",
                "train_per_task", "gss_k", "ablation_epochs", "ablation_batch", "workers"}
    float_keys = {"alpha", "beta", "epsilon", "lr", "corrupt", "ablation_strength", "si_damping"}
    if key in int_keys:
        return int(raw)
    if key in float_keys:
        return float(raw)
    return raw


def cmd_run(args: argparse.Namespace) -> int:
    from .harness import DivergedRunError, run_many
    from .report import emit_results, render_figures

    cfg = build_config(args)
    log.info("running %s over seeds %s", cfg.method, cfg.seeds)
    try:
        metrics = run_many(cfg)
    except DivergedRunError as e:
        log.error("%s", e)
        _write_diagnostic(cfg.out_dir, e.diagnostic)
        return 2
    summary = emit_results(metrics, cfg.out_dir)
    for name, entry in sorted(summary.items()):
        print(f"{name}: acc {100 * entry['mean_acc']:.2f} +- {100 * entry['std_acc']:.2f} "
              f"(n={entry['n']})")
    if not args.no_figures:
        for path in render_figures(cfg.out_dir):
            log.info("wrote %s", path)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    from .harness import DivergedRunError, sensitivity_sweep
    from .report import emit_results, emit_sweep, render_figures

    cfg = build_config(args)
    alphas = parse_grid(args.alpha_grid) if args.alpha_grid else []
    betas = parse_grid(args.beta_grid) if args.beta_grid else []
    if not alphas and not betas:
        log.error("sweep needs --alpha-grid and/or --beta-grid")
        return 1
    try:
        metrics = sensitivity_sweep(cfg, alphas, betas)
    except DivergedRunError as e:
        log.error("%s", e)
        _write_diagnostic(cfg.out_dir, e.diagnostic)
        return 2
    emit_results(metrics, cfg.out_dir)
    emit_sweep(metrics, cfg.out_dir)
    for param, grid in (("alpha", alphas), ("beta", betas)):
        for value in grid:
            accs = [m.average_accuracy for m in metrics
                    if m.sweep_param == param and m.sweep_value == value]
            if accs:
                import numpy as np

                print(f"{param}={value:g}: acc {100 * np.mean(accs):.2f} "
                      f"+- {100 * (np.std(accs, ddof=1) if len(accs) > 1 else 0.0):.2f}")
    if not args.no_figures:
        for path in render_figures(cfg.out_dir):
            log.info("wrote %s", path)
    return 0


def cmd_verify_bounds(args: argparse.Namespace) -> int:
    from .constraints import verification_suite

    out_dir = args.out_dir or "out"
    os.makedirs(out_dir, exist_ok=True)
    suite = verification_suite(
        seed=args.seed, n_nets=args.nets,
        holder_pairs=args.holder_pairs, projection_pairs=args.projection_pairs,
    )
    with open(os.path.join(out_dir, "bounds.jsonl"), "w") as f:
        for net in suite["first_order"]:
            for r in net["reports"]:
                record = {"check": "first_order", "layout": list(net["layout"]),
                          "exponent": net["exponent"]}
                record.update(r.as_dict())
                f.write(json.dumps(record) + "\n")
    summary = {k: v for k, v in suite.items() if k != "first_order"}
    with open(os.path.join(out_dir, "verify_summary.json"), "w") as f:
        json.dump(summary, f, indent=2)
    print(f"first-order gap exponent (min over {args.nets} nets): {suite['min_exponent']:.3f}")
    print(f"per-step bound violations: {suite['holder_violations']}/{suite['holder_checked']}")
    print(f"projection worst residual: {suite['projection_worst_residual']:.2e}; "
          f"norm growths: {suite['projection_norm_growths']}")
    print(f"bound homogeneity max error: {suite['homogeneity_max_error']:.2e}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    from .report import render_figures

    paths = render_figures(args.out_dir or "out")
    if not paths:
        log.error("no emitted CSVs found in %s", args.out_dir or "out")
        return 1
    for p in paths:
        print(p)
    return 0


def _write_diagnostic(out_dir, diagnostic) -> None:
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "diverged.json"), "w") as f:
            json.dump(diagnostic, f, indent=2)
    except OSError:
        pass


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    parser = argparse.ArgumentParser(prog="smart", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train and evaluate one method over seeds")
    _add_run_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="regularization-factor sensitivity sweep")
    _add_run_flags(p_sweep)
    p_sweep.add_argument("--alpha-grid", dest="alpha_grid", help="comma-separated values")
    p_sweep.add_argument("--beta-grid", dest="beta_grid", help="comma-separated values")
    p_sweep.set_defaults(func=cmd_sweep)

    p_ver = sub.add_parser("verify-bounds", help="numeric verification of the gradient bounds")
    p_ver.add_argument("--seed", type=int, default=0)
    p_ver.add_argument("--out", dest="out_dir")
    p_ver.add_argument("--nets", type=int, default=20)
    p_ver.add_argument("--holder-pairs", dest="holder_pairs", type=int, default=10_000)
    p_ver.add_argument("--projection-pairs", dest="projection_pairs", type=int, default=10_000)
    p_ver.set_defaults(func=cmd_verify_bounds)

    p_rep = sub.add_parser("report", help="render figures from emitted CSVs")
    p_rep.add_argument("--out", dest="out_dir")
    p_rep.set_defaults(func=cmd_report)

    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        log.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
