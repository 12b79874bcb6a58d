import csv
import json
import math
import os

import numpy as np
import pytest
from loguru import logger

import config
from schema import CellResult, ExperimentConfig, GridConfig, RunMetrics
from simulator.harness import (
    cell_seeds,
    estimate_byzantine_floor,
    expand_grid,
    partition_heterogeneous,
    robustness_suite,
    run_experiment,
    run_grid,
    summarize_grid,
    worst_case_max_accuracy,
)


def experiment(**overrides) -> ExperimentConfig:
    data = {
        "schema": 1,
        "name": "quad",
        "problem": {"kind": "quadratic", "dimension": 4, "L": 4.0, "kappa": 4.0, "zeta": 1.0},
        "oracle": {"sigma_sq": 1.0, "seed": 3},
        "optimizer": {"name": "byrd_nester", "eta": 0.1, "batch_size": 2, "iterations": 30},
        "aggregator": {"rule": "median", "delta": 0.2},
        "attack": {"kind": "alie"},
        "seed": 3,
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return ExperimentConfig.model_validate(data)


def test_label_sorted_partition():
    labels = np.random.default_rng(0).permutation(np.repeat(np.arange(10), 6000))
    plan = partition_heterogeneous(labels, 8, seed=1)
    assert plan.honest_count == 8
    owned = np.concatenate(plan.shards)
    assert np.array_equal(np.sort(owned), np.arange(labels.shape[0]))
    for shard in plan.shards:
        seen = np.unique(labels[shard])
        assert len(seen) <= 2
        assert seen.max() - seen.min() <= 1


def test_partition_rejects_too_few_samples():
    with pytest.raises(ValueError):
        partition_heterogeneous(np.arange(3), 8)


def test_floor_estimate_uses_the_tail():
    norms = [5.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.7, 0.6]
    assert estimate_byzantine_floor(norms, 0.25) == 0.6
    assert estimate_byzantine_floor(norms, 1.0) == 0.5
    metrics = RunMetrics()
    for t, g in enumerate(norms):
        metrics.record(t, t, g)
    assert estimate_byzantine_floor(metrics, 0.25) == 0.6
    with pytest.raises(ValueError):
        estimate_byzantine_floor(norms, 0.0)
    with pytest.raises(ValueError):
        estimate_byzantine_floor([])


def test_worst_case_max_accuracy():
    series = {"alie": [0.1, 0.8, math.nan], "ipm": [0.5, 0.6]}
    assert worst_case_max_accuracy(series) == 0.6
    with pytest.raises(ValueError):
        worst_case_max_accuracy({})
    with pytest.raises(ValueError):
        worst_case_max_accuracy({"alie": [math.nan]})


def floor_config(zeta: float) -> ExperimentConfig:
    return experiment(
        name=f"floor-{zeta}",
        problem={"kind": "lemma1_first", "zeta": zeta, "delta": 0.25},
        oracle={"sigma_sq": 0.0},
        optimizer={"name": "dsgd", "eta": 0.5, "batch_size": 1, "iterations": 200},
        aggregator={"rule": "trimmed_mean", "delta": 0.2},
        attack={"kind": "sign_flip"},
    )


def test_floor_grows_linearly_with_heterogeneity():
    floors = [run_experiment(floor_config(z))[0].floor_estimate for z in (0.5, 1.0, 2.0)]
    assert floors == pytest.approx([0.25, 0.5, 1.0], rel=1e-6)
    assert all(f > 0 for f in floors)
    assert floors[0] <= floors[1] <= floors[2]
    assert 2.0 <= floors[2] / floors[0] <= 8.0
    assert run_experiment(floor_config(0.0))[0].floor_estimate <= 1e-8


def test_run_writes_metrics_and_summary(tmp_path):
    cfg = experiment()
    summary, metrics = run_experiment(cfg, str(tmp_path))

    with open(tmp_path / config.METRICS_FILE, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == config.METRICS_HEADER
    assert len(rows) == 32
    assert [int(r[0]) for r in rows[1:]] == list(range(31))
    assert rows[1][4] == config.CSV_NAN and rows[1][5] == config.CSV_NAN
    assert all(r[5] == "NaN" for r in rows[1:])

    with open(tmp_path / config.SUMMARY_FILE) as f:
        stored = json.load(f)
    assert stored["status"] == "ok"
    assert stored["config"]["schema"] == 1
    assert stored["config"]["aggregator"]["rule"] == "median"
    assert stored["total_queries"] == summary.total_queries

    assert summary.total_queries == 2 * 31
    assert metrics.oracle_queries[-1] == summary.total_queries
    assert all(b >= a for a, b in zip(metrics.oracle_queries, metrics.oracle_queries[1:]))
    assert summary.max_accuracy is None
    assert summary.metadata["rho_delta"] == pytest.approx(64.0 / 9.0)


def test_runs_are_deterministic():
    a = run_experiment(experiment())[1]
    b = run_experiment(experiment())[1]
    assert a.grad_norm == b.grad_norm
    assert a.agg_deviation[1:] == b.agg_deviation[1:]


def test_threads_do_not_change_results():
    a = run_experiment(experiment())[1]
    b = run_experiment(experiment(), threads=3)[1]
    assert a.grad_norm == b.grad_norm


@pytest.mark.parametrize("name", ["dsgd", "dsgdm", "byrd_nester", "byrd_renester"])
def test_every_optimizer_runs(name):
    cfg = experiment(optimizer={"name": name, "eps": 1.0, "R": 2.0}, attack={"kind": "none"})
    summary, metrics = run_experiment(cfg)
    assert summary.status == "ok"
    assert math.isfinite(summary.final_grad_norm)
    assert summary.total_queries > 0


def test_prox_run_records_every_center():
    cfg = experiment(
        problem={"kind": "cosine_wells", "dimension": 2, "amplitude": 0.5, "zeta": 0.3},
        oracle={"sigma_sq": 0.01},
        optimizer={"name": "inexact_prox", "eps": 2.0, "Delta": 1.0},
        aggregator={"rule": "ideal"},
        attack={"kind": "none"},
    )
    summary, metrics = run_experiment(cfg)
    gamma = summary.metadata["Gamma"]
    assert len(metrics.rounds) == gamma + 1


def test_derived_strongly_convex_schedule():
    cfg = experiment(
        oracle={"sigma_sq": 0.0},
        optimizer={"name": "byrd_nester", "schedule": "strongly_convex", "eps": 1e-2, "iterations": 5},
        aggregator={"rule": "ideal"},
        attack={"kind": "none"},
    )
    summary, _ = run_experiment(cfg)
    params = summary.metadata["params"]
    assert params["theta"] == 1.0 and params["alpha"] == 0.0
    assert params["beta"] == pytest.approx(1.0 / 3.0)


def test_logistic_run_with_label_flip():
    cfg = experiment(
        problem={"kind": "logistic_synthetic", "train_size": 400, "test_size": 100, "num_classes": 3, "dimension": 5},
        oracle={"sigma_sq": 0.0, "noise_kind": "sample_subsampling"},
        optimizer={"name": "dsgd", "eta": 0.1, "batch_size": 8, "epochs": 3, "iterations": None},
        attack={"kind": "label_flip"},
    )
    summary, metrics = run_experiment(cfg)
    assert len(metrics.rounds) == 3 * 7 + 1
    assert len(metrics.epoch_accuracy) == 4
    assert 0.0 <= summary.max_accuracy <= 1.0
    assert summary.total_queries == 8 * 3 * 7


def test_invalid_configs_are_rejected():
    with pytest.raises(ValueError):
        experiment(n=4, byzantine=2)
    with pytest.raises(ValueError):
        experiment(colour="red")
    with pytest.raises(ValueError):
        experiment(schema=2)


def grid(delta: float = 0.4) -> GridConfig:
    base = experiment(
        oracle={"sigma_sq": 0.5},
        optimizer={"iterations": 10},
        aggregator={"delta": delta},
    )
    return GridConfig.model_validate({
        "schema": 1,
        "base": base.model_dump(by_alias=True),
        "optimizers": ["dsgd", "byrd_nester"],
        "aggregators": ["median", "faba"],
        "attacks": ["sign_flip"],
        "seeds": [5],
    })


def test_grid_expansion():
    cells = expand_grid(grid())
    assert [c.name for c in cells] == [
        "dsgd__median__sign_flip__s5",
        "dsgd__faba__sign_flip__s5",
        "byrd_nester__median__sign_flip__s5",
        "byrd_nester__faba__sign_flip__s5",
    ]
    seeds = [c.seed for c in cells]
    assert seeds == cell_seeds(5, 4)
    assert len(set(seeds)) == 4
    assert all(c.oracle.seed == c.seed and c.problem.data_seed == 5 for c in cells)
    assert [c.seed for c in expand_grid(grid())] == seeds


def test_grid_drops_label_flip_without_labels():
    g = grid().model_copy(update={"attacks": ["sign_flip", "label_flip"]})
    assert {c.attack.kind for c in expand_grid(g)} == {"sign_flip"}
    with pytest.raises(ValueError, match="label"):
        run_experiment(experiment(attack={"kind": "label_flip"}))


def test_grid_isolates_failures_and_resumes(tmp_path):
    out = str(tmp_path / "grid")
    results = run_grid(grid(), out)
    status = {r.name: r.status for r in results}
    assert status["dsgd__median__sign_flip__s5"] == "ok"
    assert status["dsgd__faba__sign_flip__s5"] == "failed"
    assert "RobustnessDomainError" in next(r.error for r in results if r.status == "failed")
    assert os.path.exists(os.path.join(out, "grid.json"))

    finished = os.path.join(out, "dsgd__median__sign_flip__s5", config.METRICS_FILE)
    os.remove(finished)
    again = run_grid(grid(), out)
    assert not os.path.exists(finished)
    assert [r.status for r in again] == [r.status for r in results]


def test_grid_reruns_are_bit_identical(tmp_path):
    first, second = str(tmp_path / "a"), str(tmp_path / "b")
    run_grid(grid(), first)
    run_grid(grid(), second, threads=2)
    name = "byrd_nester__median__sign_flip__s5"
    with open(os.path.join(first, name, config.METRICS_FILE)) as f:
        a = f.read()
    with open(os.path.join(second, name, config.METRICS_FILE)) as f:
        b = f.read()
    assert a == b


def test_robustness_suite_holds_for_every_rule():
    reports = robustness_suite(trials=1000, dim=5, seed=2, threads=2)
    assert [r.rule for r in reports] == config.ROBUST_RULES
    for r in reports:
        assert r.holds + sum(r.violations.values()) == r.trials
        assert "label_flip" not in r.violations
        assert r.rate >= 0.999, (r.rule, r.violations)


def test_robustness_suite_ignores_thread_count(monkeypatch):
    monkeypatch.setattr(config, "SUITE_CHUNK", 40)
    serial = robustness_suite(trials=200, dim=4, rules=["krum", "centered_clipping"], seed=4)
    pooled = robustness_suite(trials=200, dim=4, rules=["krum", "centered_clipping"], seed=4, threads=3)
    assert [r.model_dump() for r in serial] == [r.model_dump() for r in pooled]


def test_every_violation_is_logged_with_its_witness():
    messages = []
    sink = logger.add(messages.append, level="WARNING", format="{message}")
    try:
        (report,) = robustness_suite(trials=7, dim=3, rules=["mean"], attacks=["sign_flip"], seed=1)
    finally:
        logger.remove(sink)
    assert report.holds == 0
    assert report.violations == {"sign_flip": 7}
    assert report.witness_trials == list(range(7))
    logged = [m for m in messages if "mean violated under sign_flip" in m]
    assert len(logged) == 7
    assert all("honest mean" in m and "byzantine[0]" in m for m in logged)


def test_robustness_suite_rejects_label_flip():
    with pytest.raises(ValueError, match="label"):
        robustness_suite(trials=1, attacks=["label_flip"])


@pytest.mark.slow
@pytest.mark.skipif("MNIST_DIR" not in os.environ, reason="MNIST_DIR is not set")
@pytest.mark.parametrize("name", ["dsgd", "dsgdm", "byrd_nester"])
def test_mnist_ideal_accuracy(name):
    cfg = experiment(
        problem={"kind": "logistic_mnist", "mnist_dir": os.environ["MNIST_DIR"]},
        oracle={"sigma_sq": 0.0, "noise_kind": "sample_subsampling"},
        optimizer={"name": name, "eta": 0.1, "batch_size": 32, "epochs": 45, "iterations": None},
        aggregator={"rule": "ideal"},
        attack={"kind": "none"},
    )
    summary, _ = run_experiment(cfg, threads=4)
    assert summary.max_accuracy > 0.85


def test_grid_summary_takes_the_worst_attack():
    def cell(opt, rule, attack, accuracy, status="ok"):
        return CellResult(
            name=f"{opt}-{rule}-{attack}", status=status, optimizer=opt, aggregator=rule,
            attack=attack, grid_seed=0, max_accuracy=accuracy,
        )

    summary = summarize_grid([
        cell("dsgd", "median", "alie", 0.6),
        cell("dsgd", "median", "ipm", 0.8),
        cell("byrd_nester", "median", "alie", 0.7),
        cell("byrd_nester", "median", "ipm", 0.75),
        cell("dsgd", "faba", "alie", 0.9),
        cell("dsgd", "faba", "ipm", None, status="failed"),
    ])
    assert summary.worst_case_max_accuracy == {"dsgd": {"median": 0.6}, "byrd_nester": {"median": 0.7}}
    assert summary.versus_dsgd == {"byrd_nester": {"at_least": 1, "cells": 2}}


def test_grid_writes_worst_case_accuracy(tmp_path):
    base = experiment(
        problem={"kind": "logistic_synthetic", "train_size": 400, "test_size": 100, "num_classes": 3, "dimension": 5},
        oracle={"sigma_sq": 0.0, "noise_kind": "sample_subsampling"},
        optimizer={"eta": 0.1, "batch_size": 8, "epochs": 2, "iterations": None},
    )
    g = GridConfig.model_validate({
        "schema": 1,
        "base": base.model_dump(by_alias=True),
        "optimizers": ["dsgd", "byrd_nester"],
        "aggregators": ["median"],
        "attacks": ["alie", "label_flip"],
        "seeds": [1],
    })
    results = run_grid(g, str(tmp_path))
    assert [r.status for r in results] == ["ok"] * 4
    assert all(r.grid_seed == 1 for r in results)

    with open(tmp_path / config.GRID_FILE) as f:
        stored = json.load(f)
    assert len(stored["cells"]) == 4
    assert "config" not in stored["cells"][0]
    for opt in ("dsgd", "byrd_nester"):
        expected = min(r.max_accuracy for r in results if r.optimizer == opt)
        assert stored["worst_case_max_accuracy"][opt]["median"] == pytest.approx(expected)
    assert stored["versus_dsgd"]["byrd_nester"]["cells"] == 2


@pytest.mark.slow
@pytest.mark.skipif("MNIST_DIR" not in os.environ, reason="MNIST_DIR is not set")
def test_mnist_byrd_nester_worst_case_against_dsgd(tmp_path):
    base = experiment(
        problem={"kind": "logistic_mnist", "mnist_dir": os.environ["MNIST_DIR"]},
        oracle={"sigma_sq": 0.0, "noise_kind": "sample_subsampling"},
        optimizer={"eta": 0.1, "batch_size": 32, "epochs": 45, "iterations": None},
    )
    g = GridConfig.model_validate({
        "schema": 1,
        "base": base.model_dump(by_alias=True),
        "optimizers": ["dsgd", "byrd_nester"],
        "aggregators": ["median", "centered_clipping", "geometric_median", "trimmed_mean"],
        "attacks": ["bit_flip", "label_flip", "ipm", "alie"],
        "seeds": [0],
    })
    results = run_grid(g, str(tmp_path), threads=4)
    assert all(r.status == "ok" for r in results)
    versus = summarize_grid(results).versus_dsgd["byrd_nester"]
    assert versus["cells"] == 16
    assert versus["at_least"] >= 10
