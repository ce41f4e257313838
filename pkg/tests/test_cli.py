import json
from dataclasses import replace

import pytest

from mtsched import cli
from mtsched.cli import (
    EXIT_CHECKPOINT,
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_SMOKE,
    EXIT_USAGE,
    Experiment,
    experiment_from_dict,
    main,
    metrics,
    stream_seed,
)
from mtsched.hdrl import infer
from mtsched.timescale import SST, run_episode

TINY = {
    "cluster": {"num_edges": 2, "num_services": 2, "service_mem_footprint": [2.0, 2.0],
                "distance": [[0, 5, 20], [5, 0, 20], [20, 20, 0]]},
    "workload": {"horizon": 40, "peak": 0.6, "base": 0.1},
    "pattern": "A",
    "train": {"epochs": 1, "hidden": 8, "ppo_epochs": 1, "trajectory_len": 20, "chunk_len": 10},
    "smt_periods": [1, 10],
    "dt_grid": [1.5],
    "wt_grid": [1.0, 4.0],
}


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def test_smoke_on_default_config(capsys):
    assert main(["smoke", "--slots", "100"]) == EXIT_OK
    assert "45/45 combos complete" in capsys.readouterr().out


def test_smoke_reports_failures(monkeypatch, capsys):
    monkeypatch.setattr(cli, "smoke", lambda exp, slots: [("AM-MRP-EA", ["boom"])] + [("x", [])] * 44)
    assert main(["smoke"]) == EXIT_SMOKE
    assert "44/45" in capsys.readouterr().out


def test_usage_errors():
    assert main([]) == EXIT_USAGE
    assert main(["train", "--pattern", "Z"]) == EXIT_USAGE
    assert main(["ablate", "no-such-variant", "--epochs", "0"]) == EXIT_USAGE


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"cluster": {"edge_cpu": 0}}))
    assert main(["smoke", "--config", str(bad)]) == EXIT_CONFIG
    bad.write_text(json.dumps({"colour": "blue"}))
    assert main(["smoke", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["smoke", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["smoke", "--rules", "AM-XYZ-EA"]) == EXIT_CONFIG


def test_eval_without_checkpoint(tiny, tmp_path):
    assert main(["eval", "--config", tiny, "--out", str(tmp_path / "nothing")]) == EXIT_CHECKPOINT


def test_train_then_eval_is_reproducible(tiny, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["train", "--config", tiny, "--seed", "3", "--out", str(out)]) == EXIT_OK
        assert main(["eval", "--config", tiny, "--seed", "3", "--out", str(out)]) == EXIT_OK
        outs.append(out)
    for name in ("checkpoint.bin", "curves.csv", "ledger.csv", "metrics.csv", "plotdata.json", "experiment.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    plot = json.loads((outs[0] / "plotdata.json").read_text())
    assert plot["normalized_profit"]["edgetimer"] == 1.0
    assert set(plot["update_timeline"]) == set(cli.METHODS)


def test_checkpoint_from_other_config_is_rejected(tiny, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", tiny, "--out", str(out)]) == EXIT_OK
    assert main(["eval", "--config", tiny, "--seed", "9", "--out", str(out)]) == EXIT_CHECKPOINT


def csv_rows(path):
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


def test_ablate_no_safe_reports_unsafe_actions(tiny, tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "no-safe", "--config", tiny, "--out", str(out)]) == EXIT_OK
    row = csv_rows(out / "metrics.csv")[0]
    assert row["method"] == "no-safe"
    taken = sum(int(r["unsafe_actions"]) for r in csv_rows(out / "curves.csv")) + int(row["unsafe_actions"])
    assert taken > 0
    assert "unsafe actions" in capsys.readouterr().out


def test_safe_ablation_takes_no_unsafe_actions(tiny, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "no-central", "--config", tiny, "--out", str(out)]) == EXIT_OK
    assert all(int(r["unsafe_actions"]) == 0 and int(r["unsafe"]) == 0 for r in csv_rows(out / "curves.csv"))


def test_grid_writes_every_point(tiny, tmp_path):
    out = tmp_path / "grid"
    assert main(["grid", "--config", tiny, "--out", str(out)]) == EXIT_OK
    lines = (out / "grid.csv").read_text().splitlines()
    assert len(lines) == 1 + 8 + 1 + 2


def test_named_seed_streams_differ():
    assert stream_seed(0, "workload") != stream_seed(0, "controller")
    assert stream_seed(0, "workload") == stream_seed(0, "workload")
    assert stream_seed(1, "workload") != stream_seed(0, "workload")


def test_experiment_round_trip():
    exp = experiment_from_dict(TINY)
    assert experiment_from_dict(exp.to_dict()) == exp
    assert exp.digest() != replace(exp, seed=1).digest()


def test_identical_ledgers_normalize_to_one():
    exp = experiment_from_dict(TINY)
    script = cli.build_script(exp)
    a = run_episode(exp.cluster, script, exp.rule_set, SST())
    b = infer(SST(), exp.cluster, script, exp.rule_set)
    rows = {r["method"]: r for r in metrics({"edgetimer": a, "sst": b})}
    assert rows["sst"]["normalized_profit"] == 1.0


def test_delay_cdf_reaches_one_within_budget():
    exp = experiment_from_dict(TINY)
    res = run_episode(exp.cluster, cli.build_script(exp), exp.rule_set, SST())
    assert metrics({"sst": res})[0]["within_budget_ratio"] == 1.0
    for s, cdf in cli.delay_cdf(res, 2).items():
        if cdf["cdf"]:
            assert cdf["cdf"][-1] == 1.0


def test_metrics_need_ledgers():
    with pytest.raises(ValueError):
        metrics({})


def test_pattern_d_triples_the_horizon():
    exp = replace(experiment_from_dict(TINY), pattern="D")
    assert cli.build_script(exp).horizon == 3 * TINY["workload"]["horizon"]
