import json
import os

import pytest

from smartcl.cli import build_config, main, parse_grid, parse_seeds, read_config_file


class TestParsing:
    def test_seed_range(self):
        assert parse_seeds("0..9") == tuple(range(10))
        assert parse_seeds("2..4") == (2, 3, 4)

    def test_seed_list_and_single(self):
        assert parse_seeds("0,2,5") == (0, 2, 5)
        assert parse_seeds("7") == (7,)

    def test_grid(self):
        assert parse_grid("1e-5,0.1") == [1e-5, 0.1]

    def test_config_file(self, tmp_path):
        p = tmp_path / "cfg"
        p.write_text("# comment\nbuffer = 200\nalpha=0.001  # inline\nseeds=0..2\n")
        assert read_config_file(p) == {"buffer": "200", "alpha": "0.001", "seeds": "0..2"}

    def test_config_file_bad_line(self, tmp_path):
        p = tmp_path / "cfg"
        p.write_text("buffer 200\n")
        with pytest.raises(ValueError):
            read_config_file(p)


class TestBuildConfig:
    def test_flags_override_file(self, tmp_path):
        import argparse

        cfg_file = tmp_path / "cfg"
        cfg_file.write_text("buffer=100\nalpha=0.9\nmethod=gss\nseeds=0..1\n")
        ns = argparse.Namespace(config=str(cfg_file), buffer=250)
        cfg = build_config(ns)
        assert cfg.buffer == 250        # flag wins
        assert cfg.alpha == 0.9         # file applies
        assert cfg.method == "gss"
        assert cfg.seeds == (0, 1)

    def test_unknown_key_rejected(self, tmp_path):
        import argparse

        cfg_file = tmp_path / "cfg"
        cfg_file.write_text("warp_factor=9\n")
        with pytest.raises(ValueError):
            build_config(argparse.Namespace(config=str(cfg_file)))


class TestEndToEnd:
    def test_run_on_csv_stream(self, synthetic_stream, tmp_path):
        out = tmp_path / "out"
        code = main([
            "run", "--dataset", f"csv:{synthetic_stream}", "--method", "smart",
            "--buffer", "60", "--alpha", "0.2", "--beta", "0.0", "--lr", "0.002",
            "--epsilon", "1e-3", "--batch-size", "24", "--inner-iters", "10",
            "--replay-batch", "24", "--seeds", "0", "--out", str(out),
            "--workers", "1",
        ])
        assert code == 0
        assert (out / "results.csv").exists()
        assert (out / "summary.json").exists()
        assert (out / "buffer_timeline.png").exists()
        assert (out / "accuracy.png").exists()

    def test_run_reads_hidden_from_config_file(self, synthetic_stream, tmp_path):
        cfg_file = tmp_path / "cfg"
        cfg_file.write_text("hidden=8,8\ninner_iters=5\nworkers=1\nbeta=0.0\n")
        out = tmp_path / "out"
        code = main([
            "run", "--config", str(cfg_file), "--dataset", f"csv:{synthetic_stream}",
            "--method", "gss", "--buffer", "30", "--batch-size", "24",
            "--seeds", "1", "--out", str(out), "--no-figures",
        ])
        assert code == 0
        assert (out / "results.csv").read_text().count("\n") == 2  # header + 1 row

    def test_diverged_run_exit_code(self, one_task_stream, tmp_path):
        out = tmp_path / "out"
        code = main([
            "run", "--dataset", f"csv:{one_task_stream}", "--method", "smart",
            "--buffer", "0", "--alpha", "0", "--beta", "0", "--lr", "1e200",
            "--batch-size", "24", "--inner-iters", "10", "--seeds", "0",
            "--out", str(out), "--workers", "1", "--no-figures",
        ])
        assert code == 2
        assert json.loads((out / "diverged.json").read_text())["seed"] == 0

    def test_bad_config_exit_code(self, tmp_path):
        code = main(["run", "--method", "hovercraft", "--out", str(tmp_path)])
        assert code == 1

    def test_sweep_single_point(self, synthetic_stream, tmp_path):
        out = tmp_path / "out"
        code = main([
            "sweep", "--dataset", f"csv:{synthetic_stream}", "--buffer", "60",
            "--lr", "0.002", "--epsilon", "1e-3", "--batch-size", "24", "--beta", "0.0",
            "--inner-iters", "5", "--seeds", "0", "--out", str(out), "--workers", "1",
            "--alpha-grid", "0.05", "--no-figures",
        ])
        assert code == 0
        sweep = (out / "sweep.csv").read_text().strip().split("\n")
        assert len(sweep) == 2  # header + one row
        assert sweep[1].startswith("alpha,0.05")

    def test_sweep_requires_grid(self, synthetic_stream, tmp_path):
        code = main([
            "sweep", "--dataset", f"csv:{synthetic_stream}", "--out", str(tmp_path),
        ])
        assert code == 1

    def test_verify_bounds(self, tmp_path):
        out = tmp_path / "v"
        code = main([
            "verify-bounds", "--seed", "0", "--out", str(out),
            "--nets", "3", "--holder-pairs", "200", "--projection-pairs", "200",
        ])
        assert code == 0
        assert (out / "bounds.jsonl").exists()
        summary = json.loads((out / "verify_summary.json").read_text())
        assert summary["min_exponent"] >= 1.9
        assert summary["projection_worst_residual"] <= 1e-9

    def test_report_subcommand(self, synthetic_stream, tmp_path):
        out = tmp_path / "out"
        main([
            "run", "--dataset", f"csv:{synthetic_stream}", "--method", "gss",
            "--buffer", "30", "--batch-size", "24", "--inner-iters", "5",
            "--seeds", "0", "--out", str(out), "--workers", "1", "--no-figures",
        ])
        code = main(["report", "--out", str(out)])
        assert code == 0
        assert (out / "accuracy.png").exists()

    def test_report_empty_dir(self, tmp_path):
        assert main(["report", "--out", str(tmp_path)]) == 1
