"""Command-line interface: subcommands, overrides, exit codes."""

import json
import subprocess
import sys
import time

import pytest

from volplace.cli import main


def write_config(path, **overrides):
    payload = {
        "graph": {"synthetic": {"n_nodes": 60, "seed": 100}},
        "base_sensor_count": 10,
        "budgets": [2, 4],
        "strategies": ["random", "betweenness"],
        "rl_variants": ["curiosity"],
        "seeds": [0],
        "model": {"hidden_dim": 8, "gcn_layers": 1, "gat_heads": 2,
                  "head_hidden": 8, "edge_dim": 4, "learning_rate": 5e-3,
                  "max_epochs": 30, "patience": 30},
        "agent": {"episodes": 2, "finetune_epochs": 2, "batch_size": 8},
    }
    payload.update(overrides)
    path.write_text(json.dumps(payload))
    return path


@pytest.fixture
def cfg_path(tmp_path):
    return write_config(tmp_path / "config.json")


def test_generate_writes_graph_files(cfg_path, tmp_path, capsys):
    out = tmp_path / "gen"
    assert main(["generate", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert (out / "nodes.csv").exists()
    assert (out / "edges.csv").exists()
    assert (out / "graph.json").exists()
    assert "60-node graph" in capsys.readouterr().out
    header = (out / "nodes.csv").read_text().splitlines()[0]
    assert header.startswith("id,road_class,volume")


def test_train_writes_checkpoint(cfg_path, tmp_path, capsys):
    out = tmp_path / "train"
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert (out / "checkpoint.json").exists()
    report = json.loads((out / "train_report.json").read_text())
    assert report["epochs_run"] >= 1
    assert report["best_val_mse"] > 0
    assert "val mse" in capsys.readouterr().out


def test_place_ranks_all_strategies(cfg_path, tmp_path, capsys):
    out = tmp_path / "place"
    assert main(["place", "--config", str(cfg_path), "--out", str(out)]) == 0
    payload = json.loads((out / "placements.json").read_text())
    assert set(payload["placements"]) == {"random", "betweenness", "rl-curiosity"}
    assert payload["budget"] == 4
    for ranked in payload["placements"].values():
        assert len(ranked) == 4  # ranked list at max budget
    assert (out / "scores-betweenness.csv").exists()
    assert "ranked 4 placements" in capsys.readouterr().out


def test_compare_then_report(cfg_path, tmp_path, capsys):
    out = tmp_path / "cmp"
    assert main(["compare", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert "wrote 6 cells" in capsys.readouterr().out

    assert main(["report", "--in", str(out / "report.json")]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].split("\t") == ["strategy", "budget", "mse_mean",
                                    "mse_std", "n"]
    assert len(table) == 1 + 6  # three strategies x two budgets

    assert main(["report", "--in", str(out / "report.json"),
                 "--metric", "mae"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 7


def test_compare_models_flag(cfg_path, tmp_path):
    out = tmp_path / "cmp"
    assert main(["compare", "--config", str(cfg_path), "--out", str(out),
                 "--budget", "2", "--models"]) == 0
    payload = json.loads((out / "models.json").read_text())
    assert payload["arms"] == ["hybrid-gnn", "linear", "mlp"]


def test_ablate_four_arms(cfg_path, tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(cfg_path), "--out", str(out),
                 "--budget", "2"]) == 0
    payload = json.loads((out / "ablation.json").read_text())
    assert payload["arms"] == ["full", "no-rl", "gcn-only", "gat-only"]
    assert "4 ablation cells" in capsys.readouterr().out


def test_coverage_by_strategy(cfg_path, tmp_path):
    out = tmp_path / "cov"
    assert main(["coverage", "--config", str(cfg_path), "--out", str(out),
                 "--strategy", "betweenness"]) == 0
    payload = json.loads((out / "coverage.json").read_text())
    assert payload["kind"] == "coverage"
    assert sum(payload["sensors_before"]) == 10
    assert sum(payload["sensors_after"]["4"]) == 14


def test_coverage_fixture_mode(cfg_path, tmp_path):
    out = tmp_path / "fix"
    assert main(["coverage", "--config", str(cfg_path), "--out", str(out),
                 "--fixture"]) == 0
    payload = json.loads((out / "coverage.json").read_text())
    counts = dict(zip(payload["classes"], payload["sensors_before"]))
    assert counts["ProtectedBikeLane"] == 67
    assert counts["ArterialMixed"] == 10
    assert counts["LocalMixed"] == 1


def test_seed_and_budget_overrides(cfg_path, tmp_path):
    out = tmp_path / "ovr"
    assert main(["compare", "--config", str(cfg_path), "--out", str(out),
                 "--seed", "5", "--budget", "2"]) == 0
    payload = json.loads((out / "report.json").read_text())
    assert payload["config"]["seeds"] == [5]
    assert payload["config"]["budgets"] == [2]
    assert {c["seed"] for c in payload["cells"]} == {5}


def test_compare_rerun_byte_identical(cfg_path, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    base = ["compare", "--config", str(cfg_path), "--seed", "1", "--budget", "2"]
    assert main(base + ["--out", str(a)]) == 0
    assert main(base + ["--out", str(b)]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert (a / "cells.csv").read_bytes() == (b / "cells.csv").read_bytes()


# --------------------------------------------------------------------------
# Exit codes
# --------------------------------------------------------------------------

def test_unknown_flag_exits_1(cfg_path, capsys):
    assert main(["compare", "--config", str(cfg_path), "--bogus"]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "--bogus" in err


def test_unknown_subcommand_exits_1(capsys):
    assert main(["frobnicate"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_no_subcommand_exits_1(capsys):
    assert main([]) == 1
    assert "usage:" in capsys.readouterr().err


def test_missing_config_exits_1(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 1
    assert "error (validation)" in capsys.readouterr().err


def test_invalid_config_key_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    write_config(bad, mystery_knob=3)
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "mystery_knob" in capsys.readouterr().err


def test_budget_too_large_exits_1(cfg_path, tmp_path, capsys):
    assert main(["compare", "--config", str(cfg_path),
                 "--out", str(tmp_path / "o"), "--budget", "500"]) == 1
    assert "error (validation)" in capsys.readouterr().err


def test_unwritable_out_exits_2(cfg_path, tmp_path, capsys):
    blocker = tmp_path / "blocker"
    blocker.write_text("a file, not a directory")
    code = main(["generate", "--config", str(cfg_path),
                 "--out", str(blocker / "sub")])
    assert code == 2
    assert "error (runtime)" in capsys.readouterr().err


def test_report_on_missing_file_exits_1(tmp_path, capsys):
    assert main(["report", "--in", str(tmp_path / "absent.json")]) == 1
    assert "error (validation)" in capsys.readouterr().err


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "volplace.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("generate", "train", "place", "compare", "ablate",
                 "coverage", "report"):
        assert name in proc.stdout


def test_pipeline_on_emitted_files(tmp_path, capsys):
    """generate -> compare on the emitted CSVs, 200 nodes, well under 10 min."""
    t0 = time.perf_counter()
    gen_cfg = write_config(tmp_path / "gen.json",
                           graph={"synthetic": {"n_nodes": 200, "seed": 7}})
    gen_out = tmp_path / "graph"
    assert main(["generate", "--config", str(gen_cfg), "--out", str(gen_out)]) == 0

    run_cfg = write_config(
        tmp_path / "run.json",
        graph={"nodes_csv": str(gen_out / "nodes.csv"),
               "edges_csv": str(gen_out / "edges.csv")},
        base_sensor_count=20,
        budgets=[5, 10],
        strategies=["random", "betweenness"],
        rl_variants=["curiosity"],
        seeds=[0],
        agent={"episodes": 3, "finetune_epochs": 2, "batch_size": 8},
    )
    out = tmp_path / "study"
    assert main(["compare", "--config", str(run_cfg), "--out", str(out)]) == 0
    payload = json.loads((out / "report.json").read_text())
    assert len(payload["cells"]) == 6
    assert payload["config"]["graph"]["nodes_csv"].endswith("nodes.csv")
    assert main(["report", "--in", str(out / "report.json")]) == 0
    assert time.perf_counter() - t0 < 600
    capsys.readouterr()
