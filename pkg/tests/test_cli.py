import argparse
import json
import os

import config
from simulate import _seed, main


RUN_CONFIG = {
    "schema": 1,
    "name": "cli-run",
    "problem": {"kind": "quadratic", "dimension": 3, "L": 2.0, "kappa": 2.0, "zeta": 0.5},
    "oracle": {"sigma_sq": 0.1},
    "optimizer": {"name": "dsgdm", "eta": 0.1, "batch_size": 2, "iterations": 20},
    "aggregator": {"rule": "geometric_median", "delta": 0.2},
    "attack": {"kind": "ipm"},
}


def write_json(path, data):
    with open(path, "w") as f:
        json.dump(data, f)
    return str(path)


def test_lowerbound_lemma1(capsys):
    assert main(["--quiet", "lowerbound", "lemma1", "--rounds", "50"]) == 0
    out = capsys.readouterr().out
    assert out.count("✓") == 3


def test_lowerbound_lemma6(capsys):
    assert main(["--quiet", "lowerbound", "lemma6", "--draws", "20000", "--rounds", "50"]) == 0
    out = capsys.readouterr().out
    assert "Escape threshold m* = 76" in out
    assert "stayed" in out


def test_lowerbound_chain(capsys):
    assert main(["--quiet", "--seed", "4", "lowerbound", "chain", "--points", "100"]) == 0
    assert "✓" in capsys.readouterr().out


def test_run_writes_outputs(tmp_path, capsys):
    cfg = write_json(tmp_path / "run.json", RUN_CONFIG)
    out_dir = tmp_path / "out"
    assert main(["--quiet", "--out-dir", str(out_dir), "--seed", "7", "run", cfg]) == 0
    assert os.path.exists(out_dir / config.METRICS_FILE)
    with open(out_dir / config.SUMMARY_FILE) as f:
        summary = json.load(f)
    assert summary["seed"] == 7
    assert "cli-run" in capsys.readouterr().out


def test_invalid_config_fails(tmp_path, capsys):
    cfg = write_json(tmp_path / "bad.json", {**RUN_CONFIG, "schema": 3})
    assert main(["--quiet", "run", cfg]) == 1
    assert "✗" in capsys.readouterr().err
    assert main(["--quiet", "run", str(tmp_path / "missing.json")]) == 1


def test_sweep_reports_failed_cells(tmp_path, capsys):
    grid = {
        "schema": 1,
        "base": {**RUN_CONFIG, "aggregator": {"rule": "median", "delta": 0.4}},
        "optimizers": ["dsgd"],
        "aggregators": ["median", "faba"],
        "attacks": ["none"],
    }
    path = write_json(tmp_path / "grid.json", grid)
    assert main(["--quiet", "--out-dir", str(tmp_path / "grid"), "sweep", path]) == 1
    out = capsys.readouterr().out
    assert "1/2 cells finished" in out


def test_verify_aggregators_prints_every_rule(capsys):
    main(["--quiet", "verify-aggregators", "--trials", "45", "--dim", "4"])
    out = capsys.readouterr().out
    for rule in config.ROBUST_RULES:
        assert rule in out


def test_explicit_zero_seed_is_kept(monkeypatch):
    monkeypatch.setattr(config, "DEFAULT_SEED", 5)
    assert _seed(argparse.Namespace(seed=0)) == 0
    assert _seed(argparse.Namespace(seed=None)) == 5


def test_verify_aggregators_output_ignores_threads(capsys):
    args = ["verify-aggregators", "--trials", "60", "--dim", "3"]
    main(["--quiet", *args])
    serial = capsys.readouterr().out
    main(["--quiet", "--threads", "3", *args])
    assert capsys.readouterr().out == serial
