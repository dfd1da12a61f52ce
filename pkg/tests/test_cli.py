"""Command-line surface: verbs, exit codes, config files, CSV shapes."""

import csv
import os

import numpy as np
import pytest

from fambav import cli
from fambav.errors import ConfigError

TINY_ARGS = [
    "--image-h", "8", "--image-w", "8", "--patch", "2", "--dim", "8",
    "--e-dim", "16", "--n-state", "2", "--synthetic", "48,4,7",
    "--batch-size", "16", "--no-augment",
]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestRun:
    def test_row_count_matches_epochs(self, tmp_path):
        out = str(tmp_path / "runs")
        code = cli.main(["run", *TINY_ARGS, "--l-total", "2", "--strategy", "upper",
                         "--start", "1", "--r", "2", "--epochs", "3",
                         "--seed", "7", "--out-dir", out])
        assert code == 0
        csvs = [f for f in os.listdir(out) if f.endswith(".csv")]
        assert len(csvs) == 1
        rows = read_csv(os.path.join(out, csvs[0]))
        assert len(rows) == 3
        assert rows[0]["strategy"] == "upper"
        assert {r["epoch"] for r in rows} == {"0", "1", "2"}

    def test_infeasible_plan_exits_2(self, tmp_path, capsys):
        code = cli.main(["run", *TINY_ARGS, "--l-total", "2", "--strategy", "all",
                         "--r", "999", "--epochs", "1",
                         "--out-dir", str(tmp_path / "x")])
        assert code == 2
        assert "infeasible plan at layer" in capsys.readouterr().err

    def test_rerun_identical_except_seconds(self, tmp_path):
        outs = []
        for sub in ("a", "b"):
            out = str(tmp_path / sub)
            code = cli.main(["run", *TINY_ARGS, "--l-total", "1", "--strategy",
                             "none", "--epochs", "2", "--seed", "5",
                             "--out-dir", out])
            assert code == 0
            csv_name = [f for f in os.listdir(out) if f.endswith(".csv")][0]
            outs.append(read_csv(os.path.join(out, csv_name)))
        for ra, rb in zip(*outs):
            for key in ra:
                if key == "epoch_seconds":
                    continue
                assert ra[key] == rb[key], key

    def test_trace_file(self, tmp_path):
        trace = tmp_path / "merges.txt"
        code = cli.main(["run", *TINY_ARGS, "--l-total", "2", "--strategy", "all",
                         "--r", "2", "--epochs", "1", "--out-dir",
                         str(tmp_path / "t"), "--trace-file", str(trace)])
        assert code == 0
        lines = trace.read_text().strip().splitlines()
        assert lines
        for line in lines:
            layer, a, b, sim = line.split(",")
            assert int(a) != 0 and int(b) != 0
            float(sim)


class TestCompare:
    def test_dry_run_full_depth_shape(self, tmp_path):
        import time

        out = str(tmp_path / "cmp")
        t0 = time.perf_counter()
        code = cli.main(["compare", "--l-total", "24", "--image-h", "112",
                         "--image-w", "112", "--patch", "8", "--budget", "168",
                         "--dry-run", "--out-dir", out])
        assert time.perf_counter() - t0 < 1.0  # analytics only, no model
        assert code == 0
        rows = read_csv(os.path.join(out, "compare_budget168.csv"))
        got = {r["strategy"]: int(r["token_steps"]) for r in rows}
        assert got == {"none": 4728, "all": 2628, "interleaved": 2712,
                       "lower": 2163, "upper": 3018}
        totals = {r["strategy"]: int(r["total_reduced"]) for r in rows}
        assert totals == {"none": 0, "all": 168, "interleaved": 168,
                          "lower": 171, "upper": 171}

    def test_trained_compare_rows_above_chance(self, tmp_path):
        out = str(tmp_path / "cmp")
        code = cli.main(["compare", *TINY_ARGS, "--l-total", "2", "--budget", "2",
                         "--epochs", "2", "--seed", "3", "--out-dir", out])
        assert code == 0
        rows = read_csv(os.path.join(out, "compare_budget2.csv"))
        assert len(rows) == 5
        # Four balanced classes: anything above 0.25 beats chance.
        assert all(float(r["top1"]) > 0.25 for r in rows)


class TestSweeps:
    def test_sweep_start_dry_run_values(self, tmp_path):
        out = str(tmp_path / "ss")
        code = cli.main(["sweep-start", "--l-total", "24", "--image-h", "112",
                         "--image-w", "112", "--patch", "8", "--budget", "171",
                         "--starts", "6,10,15", "--dry-run", "--out-dir", out])
        assert code == 0
        rows = read_csv(os.path.join(out, "sweep_start_budget171.csv"))
        by_start = {int(r["start_layer"]): r for r in rows}
        assert int(by_start[6]["r"]) == 9
        assert int(by_start[6]["total_reduced"]) == 171
        assert int(by_start[6]["token_steps"]) == 3018
        assert int(by_start[10]["token_steps"]) == 3408
        assert int(by_start[15]["token_steps"]) == 3793

    def test_sweep_start_infeasible_start_exits_2(self, tmp_path):
        code = cli.main(["sweep-start", "--l-total", "8", "--budget", "24",
                         "--starts", "9", "--dry-run",
                         "--out-dir", str(tmp_path / "s")])
        assert code == 2

    def test_sweep_r_zero_matches_no_fusion(self, tmp_path):
        out = str(tmp_path / "sr")
        code = cli.main(["sweep-r", "--l-total", "24", "--image-h", "112",
                         "--image-w", "112", "--patch", "8", "--start", "6",
                         "--rs", "0,1,9", "--dry-run", "--out-dir", out])
        assert code == 0
        rows = read_csv(os.path.join(out, "sweep_r_start6.csv"))
        steps = [int(r["token_steps"]) for r in rows]
        assert steps[0] == 4728  # r=0 is exactly the no-fusion total
        assert steps == sorted(steps, reverse=True)

    def test_sweep_r_strictly_decreasing_full_range(self, tmp_path):
        out = str(tmp_path / "sr9")
        code = cli.main(["sweep-r", "--l-total", "24", "--image-h", "112",
                         "--image-w", "112", "--patch", "8", "--start", "6",
                         "--rs", ",".join(str(r) for r in range(1, 10)),
                         "--dry-run", "--out-dir", out])
        assert code == 0
        rows = read_csv(os.path.join(out, "sweep_r_start6.csv"))
        steps = [int(r["token_steps"]) for r in rows]
        assert all(a > b for a, b in zip(steps, steps[1:]))
        # Start 6 of 24 fuses 19 layers: totals are r * 19.
        assert [int(r["total_reduced"]) for r in rows] == [r * 19 for r in range(1, 10)]


class TestCompareWorkers:
    def test_worker_pool_matches_sequential(self, tmp_path, monkeypatch):
        results = {}
        for workers, sub in (("1", "seq"), ("2", "pool")):
            monkeypatch.setenv("FAMBAV_THREADS", workers)
            out = str(tmp_path / sub)
            code = cli.main(["compare", *TINY_ARGS, "--l-total", "2", "--budget",
                             "2", "--epochs", "1", "--seed", "3", "--out-dir", out])
            assert code == 0
            results[sub] = read_csv(os.path.join(out, "compare_budget2.csv"))
        for ra, rb in zip(results["seq"], results["pool"]):
            for key in ("strategy", "r", "token_steps", "total_reduced", "top1", "top5"):
                assert ra[key] == rb[key], key

    def test_bad_threads_value(self, monkeypatch, tmp_path):
        monkeypatch.setenv("FAMBAV_THREADS", "lots")
        code = cli.main(["compare", *TINY_ARGS, "--l-total", "2", "--budget", "2",
                         "--epochs", "1", "--out-dir", str(tmp_path / "x")])
        assert code == 2


class TestNumericalAbort:
    def test_divergent_lr_exits_3(self, tmp_path, capsys):
        code = cli.main(["run", *TINY_ARGS, "--l-total", "2", "--strategy", "none",
                         "--epochs", "2", "--base-lr", "1e30", "--warmup-epochs", "0",
                         "--out-dir", str(tmp_path / "x")])
        assert code == 3
        assert "numerical abort" in capsys.readouterr().err


class TestPlot:
    def test_empty_csv_exits_2(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("strategy,token_steps,top1\n")
        assert cli.main(["plot", str(path), "--out", str(tmp_path / "p.png")]) == 2

    def test_missing_file_exits_2(self, tmp_path):
        assert cli.main(["plot", str(tmp_path / "nope.csv")]) == 2

    def test_single_row_chart(self, tmp_path):
        path = tmp_path / "one.csv"
        path.write_text("strategy,token_steps,top1\nupper,100,0.5\n")
        out = tmp_path / "one.png"
        assert cli.main(["plot", str(path), "--out", str(out)]) == 0
        assert out.stat().st_size > 0

    def test_five_strategy_chart(self, tmp_path):
        path = tmp_path / "five.csv"
        lines = ["strategy,token_steps,top1"]
        for i, kind in enumerate(["none", "all", "interleaved", "lower", "upper"]):
            lines.append(f"{kind},{100 + i},0.{i + 1}")
        path.write_text("\n".join(lines) + "\n")
        out = tmp_path / "five.png"
        assert cli.main(["plot", str(path), "--out", str(out)]) == 0
        assert out.stat().st_size > 0


class TestConfigFile:
    def test_file_plus_override(self, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text("""
# experiment file
l_total = 4
dim = 16
augment = false
strategy = upper
seed = 11
""")
        args = cli.make_parser().parse_args(
            ["run", "--config", str(cfg), "--dim", "32"])
        exp = cli.build_experiment(args)
        assert exp.l_total == 4
        assert exp.dim == 32  # CLI flag wins
        assert exp.augment is False
        assert exp.strategy == "upper"
        assert exp.seed == 11

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text("no_such_knob = 3\n")
        with pytest.raises(ConfigError, match="no_such_knob"):
            cli.load_config_file(str(cfg))

    def test_malformed_line_rejected(self, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text("just words\n")
        with pytest.raises(ConfigError, match="key=value"):
            cli.load_config_file(str(cfg))

    def test_bad_bool_rejected(self, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text("augment = maybe\n")
        with pytest.raises(ConfigError, match="boolean"):
            cli.load_config_file(str(cfg))

    def test_missing_config_file_exits_2(self, tmp_path):
        assert cli.main(["run", "--config", str(tmp_path / "none.cfg")]) == 2


class TestSelftest:
    def test_selftest_passes(self, capsys):
        assert cli.main(["selftest"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and out.count("PASS") >= 6
