"""
Experiment harness: builds problems from config, runs one experiment or a
grid of them, writes metrics incrementally and summarizes Byzantine floors.
"""

import csv
import itertools
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, List, Dict, Sequence, Tuple, Union

import numpy as np
from loguru import logger

import config
import utils
from schema import (
    AggregatorConfig, AttackConfig, ByrdNesterParams, CellResult, ExperimentConfig,
    GridConfig, GridSummary, OptimizerDescriptor, ProblemDescriptor, RobustnessCheck,
    RunMetrics, SuiteResult,
)
from .problems import (
    PartitionPlan, ProblemSpec, cosine_wells_problem, lemma1_problem, lemma6_problem,
    make_logistic_problem, random_quadratic_problem,
)
from .oracles import Oracle, generator
from .aggregators import build_aggregator, check_robustness, robustness_coefficient
from .attacks import AttackContext, craft
from .optimizers import (
    Cluster, OptimizerState, RunResult, nonconvex_defaults, run_byrd_nester,
    run_byrd_renester, run_dsgd, run_dsgdm, run_inexact_prox, strongly_convex_defaults,
)


def partition_heterogeneous(labels, honest_count: int, seed: int = config.DEFAULT_SEED) -> PartitionPlan:
    """
    Sort samples by label and cut them into |H| contiguous chunks.

    Each node sees only one or two neighbouring labels. Sample order inside a
    chunk is shuffled with a generator keyed by (seed, node).

    Raises:
        ValueError: If there are fewer samples than honest nodes
    """
    labels = np.asarray(labels)
    if honest_count < 1:
        raise ValueError("at least one honest node is required")
    if labels.shape[0] < honest_count:
        raise ValueError(f"{labels.shape[0]} samples cannot cover {honest_count} honest nodes")
    order = np.argsort(labels, kind="stable")
    shards = []
    for node, chunk in enumerate(np.array_split(order, honest_count)):
        shards.append(generator(seed, node, 0, 0x5A).permutation(chunk))
    return PartitionPlan(shards)


def _logistic_problem(desc: ProblemDescriptor, n: int, honest: int, seed: int) -> ProblemSpec:
    if desc.kind == "logistic_mnist":
        if desc.mnist_dir is None:
            raise ValueError("logistic_mnist needs problem.mnist_dir")
        X_tr, y_tr, X_te, y_te = utils.load_mnist(desc.mnist_dir, desc.train_size, desc.test_size, download=True)
        num_classes = 10
    else:
        X, y = utils.make_blobs(desc.train_size + desc.test_size, desc.num_classes, desc.dimension, seed)
        X_tr, y_tr = X[:desc.train_size], y[:desc.train_size]
        X_te, y_te = X[desc.train_size:], y[desc.train_size:]
        num_classes = desc.num_classes

    plan = partition_heterogeneous(y_tr, honest, seed)
    test_set = (X_te, y_te) if X_te.shape[0] else None
    return make_logistic_problem(
        X_tr, y_tr, n, desc.l2, plan, num_classes=num_classes, test_set=test_set, seed=seed,
    )


def build_problem(desc: ProblemDescriptor, n: int, byzantine: int, seed: int = config.DEFAULT_SEED) -> Tuple[ProblemSpec, np.ndarray]:
    """
    Build the objective a descriptor names and a starting point.

    Args:
        desc: Problem family and constants
        n: Total node count
        byzantine: Byzantine node count (appended after the honest nodes)
        seed: Seed for data, offsets and the random start; problem.data_seed takes precedence

    Returns:
        (problem, x0)
    """
    if desc.data_seed is not None:
        seed = desc.data_seed
    honest = n - byzantine
    rng = np.random.default_rng(seed)
    if desc.kind == "quadratic":
        problem = random_quadratic_problem(
            desc.dimension, desc.L, desc.L / desc.kappa, desc.zeta, honest, byzantine, seed,
        )
    elif desc.kind in ("lemma1_first", "lemma1_second"):
        problem = lemma1_problem(
            desc.delta, desc.zeta, honest, second=desc.kind == "lemma1_second",
            rho=desc.rho, alpha_min=desc.alpha_min, byzantine=byzantine,
        )
        return problem, np.full(1, desc.x0_scale)
    elif desc.kind == "lemma6":
        return lemma6_problem(desc.L, desc.eps, honest, byzantine), np.zeros(1)
    elif desc.kind == "cosine_wells":
        problem = cosine_wells_problem(
            desc.dimension, desc.amplitude, desc.frequency, desc.zeta, honest, byzantine, seed,
        )
    else:
        problem = _logistic_problem(desc, n, honest, seed)
        return problem, np.zeros(problem.d)

    return problem, desc.x0_scale * rng.normal(size=problem.d)


def build_cluster(
    cfg: ExperimentConfig,
    problem: ProblemSpec,
    executor: Optional[ThreadPoolExecutor] = None,
) -> Cluster:
    """Wire oracle, aggregator and attack around a problem; validates delta for the rule."""
    aggregator = build_aggregator(cfg.aggregator, problem.honest_count)
    oracle = Oracle(cfg.oracle, problem, executor=executor)
    return Cluster(problem, oracle, aggregator, attack=cfg.attack, seed=cfg.seed)


def rounds_per_epoch(problem: ProblemSpec, batch_size: int) -> int:
    """Rounds for the smallest honest shard to be seen once; 1 for synthetic problems."""
    sizes = [getattr(loss, "num_samples", 0) for loss in problem.losses]
    if not all(sizes):
        return 1
    return max(int(math.ceil(min(sizes) / batch_size)), 1)


def _radius(problem: ProblemSpec, x0: np.ndarray, opt: OptimizerDescriptor) -> float:
    if opt.R is not None:
        return opt.R
    if problem.x_star is not None:
        return max(float(np.linalg.norm(x0 - problem.x_star)), 1e-12)
    return 1.0


def _initial_gap(problem: ProblemSpec, x0: np.ndarray, opt: OptimizerDescriptor) -> float:
    if opt.Delta is not None:
        return opt.Delta
    if problem.f_star is not None:
        return max(problem.value(x0) - problem.f_star, 1e-12)
    if problem.lower_bound is not None:
        return max(problem.value(x0) - problem.lower_bound, 1e-12)
    return 1.0


def resolve_byrd_nester(cfg: ExperimentConfig, cluster: Cluster, x0: np.ndarray, T: int) -> ByrdNesterParams:
    """Byrd-Nester parameters from the manual fields or a derived schedule."""
    opt = cfg.optimizer
    problem = cluster.problem
    sigma_sq = cfg.oracle.sigma_sq
    if opt.schedule == "strongly_convex":
        return strongly_convex_defaults(
            problem.L, problem.mu, sigma_sq, problem.delta, problem.n, cluster.robustness(),
            opt.eps, _radius(problem, x0, opt), opt.query_cap,
        )
    if opt.schedule == "nonconvex":
        return nonconvex_defaults(
            problem.L, problem.delta, problem.n, cluster.robustness(), sigma_sq, T,
            _initial_gap(problem, x0, opt), m=opt.batch_size, query_cap=opt.query_cap,
        )
    return ByrdNesterParams(
        eta=opt.eta, theta=opt.theta, beta=opt.beta, alpha=opt.alpha,
        m=opt.batch_size, m0=opt.batch_size, T=T,
    )


def _csv_row(values: Sequence) -> list:
    return [config.CSV_NAN if isinstance(v, float) and math.isnan(v) else v for v in values]


class MetricsWriter:
    """Records rounds into RunMetrics and appends them to metrics.csv as they happen."""

    def __init__(self, problem: ProblemSpec, ledger, out_dir: Optional[str], epoch_rounds: int):
        self.problem = problem
        self.ledger = ledger
        self.metrics = RunMetrics()
        self.epoch_rounds = epoch_rounds
        self.round = 0
        self.start = time.perf_counter()
        self._file = None
        self._writer = None
        if out_dir is not None:
            self._file = open(os.path.join(out_dir, config.METRICS_FILE), "w", newline="")
            self._writer = csv.writer(self._file)
            self._writer.writerow(config.METRICS_HEADER)

    def record(self, x: np.ndarray, deviation: float = math.nan) -> None:
        accuracy = math.nan
        if self.round % self.epoch_rounds == 0:
            accuracy = self.problem.accuracy(x)
            if not math.isnan(accuracy):
                self.metrics.epoch_accuracy.append(accuracy)
        self.metrics.record(
            self.round,
            self.ledger.count,
            float(np.linalg.norm(self.problem.full_gradient(x))),
            self.problem.gap(x),
            deviation,
            accuracy,
            time.perf_counter() - self.start,
        )
        if self._writer is not None:
            self._writer.writerow(_csv_row(self.metrics.row(len(self.metrics.rounds) - 1)))
            self._file.flush()

    def __call__(self, state: OptimizerState) -> None:
        self.round += 1
        self.record(state.x, state.deviation)

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None


def _dispatch(cfg: ExperimentConfig, cluster: Cluster, x0: np.ndarray, writer: MetricsWriter, T: int) -> Tuple[RunResult, Dict]:
    opt = cfg.optimizer
    if opt.name == "dsgd":
        return run_dsgd(cluster, x0, opt.eta, opt.batch_size, T, writer, keep_trajectory=False), {}
    if opt.name == "dsgdm":
        result = run_dsgdm(cluster, x0, opt.eta, opt.momentum, opt.batch_size, T, writer, keep_trajectory=False)
        return result, {}
    if opt.name == "byrd_nester":
        params = resolve_byrd_nester(cfg, cluster, x0, T)
        mode = "nonconvex" if opt.schedule == "nonconvex" else "strongly_convex"
        result = run_byrd_nester(cluster, x0, params, mode, writer, keep_trajectory=False)
        return result, {"params": params.model_dump()}
    if opt.name == "byrd_renester":
        result = run_byrd_renester(cluster, x0, opt.eps, _radius(cluster.problem, x0, opt), opt.query_cap, writer)
        return result, {}

    result = run_inexact_prox(cluster, x0, opt.eps, _initial_gap(cluster.problem, x0, opt), query_cap=opt.query_cap)
    for center in result.trajectory[1:]:
        writer.round += 1
        writer.record(center)
    return result, {}


def estimate_byzantine_floor(metrics: Union[RunMetrics, Sequence[float]], tail_fraction: float = config.TAIL_FRACTION) -> float:
    """Minimum gradient norm over the last ceil(tail_fraction * rounds) rounds."""
    if not 0 < tail_fraction <= 1:
        raise ValueError("tail_fraction must lie in (0, 1]")
    values = metrics.grad_norm if isinstance(metrics, RunMetrics) else list(metrics)
    if len(values) == 0:
        raise ValueError("no rounds recorded")
    k = max(int(math.ceil(tail_fraction * len(values))), 1)
    return float(np.min(values[-k:]))


def worst_case_max_accuracy(accuracy_by_attack: Dict[str, Sequence[float]]) -> float:
    """min over attacks of the best accuracy reached under that attack."""
    if not accuracy_by_attack:
        raise ValueError("at least one attack is required")
    best = []
    for attack, series in accuracy_by_attack.items():
        values = [a for a in series if not math.isnan(a)]
        if not values:
            raise ValueError(f"no accuracy recorded under attack {attack}")
        best.append(max(values))
    return float(min(best))


def _write_summary(out_dir: str, result: CellResult) -> None:
    with open(os.path.join(out_dir, config.SUMMARY_FILE), "w") as f:
        json.dump(result.model_dump(), f, indent=2, default=str)


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: Optional[str] = None,
    threads: int = 1,
) -> Tuple[CellResult, RunMetrics]:
    """
    Run one configured experiment.

    Args:
        cfg: Experiment configuration
        out_dir: Directory for metrics.csv and summary.json; nothing is written when None
        threads: Worker threads computing honest gradients

    Returns:
        (summary, per-round metrics)

    Raises:
        RobustnessDomainError: If the aggregator's delta is outside its tolerance
    """
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    problem, x0 = build_problem(cfg.problem, cfg.n, cfg.byzantine, cfg.seed)
    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    writer = None
    try:
        cluster = build_cluster(cfg, problem, executor)
        epoch_rounds = rounds_per_epoch(problem, cfg.optimizer.batch_size)
        T = cfg.optimizer.iterations or cfg.optimizer.epochs * epoch_rounds
        logger.info(
            f"{cfg.name}: {problem.name} d={problem.d} n={problem.n} |H|={problem.honest_count} "
            f"{cfg.optimizer.name}/{cfg.aggregator.rule}/{cfg.attack.kind} for {T} rounds"
        )
        writer = MetricsWriter(problem, cluster.ledger, out_dir, epoch_rounds)
        writer.record(x0)
        result, extra = _dispatch(cfg, cluster, x0, writer, T)
    finally:
        if writer is not None:
            writer.close()
        if executor is not None:
            executor.shutdown()

    metrics = writer.metrics
    metrics.floor_estimate = estimate_byzantine_floor(metrics, cfg.tail_fraction)
    accuracies = [a for a in metrics.epoch_accuracy if not math.isnan(a)]
    metadata = {**result.metadata, **extra, "rho_delta": cluster.robustness(), "zeta_sq": problem.zeta_sq}
    summary = CellResult(
        name=cfg.name,
        status="ok",
        optimizer=cfg.optimizer.name,
        aggregator=cfg.aggregator.rule,
        attack=cfg.attack.kind,
        seed=cfg.seed,
        total_queries=cluster.ledger.count,
        final_grad_norm=float(np.linalg.norm(problem.full_gradient(result.final))),
        floor_estimate=metrics.floor_estimate,
        max_accuracy=max(accuracies) if accuracies else None,
        metadata=metadata,
        config=cfg.model_dump(by_alias=True),
    )
    if out_dir is not None:
        _write_summary(out_dir, summary)
    logger.info(f"{cfg.name}: floor~{summary.floor_estimate:.4g}, {summary.total_queries} queries")
    return summary, metrics


def cell_name(optimizer: str, rule: str, attack: str, seed: int) -> str:
    return f"{optimizer}__{rule}__{attack}__s{seed}"


def cell_seeds(grid_seed: int, count: int) -> List[int]:
    """Independent per-cell seeds spawned from one grid seed."""
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(grid_seed).spawn(count)]


def _expand(grid: GridConfig) -> List[Tuple[int, ExperimentConfig]]:
    base = grid.base.model_dump(by_alias=True)
    combos = list(itertools.product(grid.optimizers, grid.aggregators, grid.attacks))
    spawned = {s: cell_seeds(s, len(combos)) for s in grid.seeds}
    labeled = grid.base.problem.kind in config.LABELED_PROBLEMS
    if not labeled and "label_flip" in grid.attacks:
        logger.warning(f"grid: dropping label_flip, {grid.base.problem.kind} has no labels")

    cells = []
    for k, (opt, rule, attack) in enumerate(combos):
        if attack == "label_flip" and not labeled:
            continue
        for s in grid.seeds:
            data = json.loads(json.dumps(base))
            data["name"] = cell_name(opt, rule, attack, s)
            data["optimizer"]["name"] = opt
            data["aggregator"]["rule"] = rule
            data["attack"]["kind"] = attack
            data["seed"] = spawned[s][k]
            data["oracle"]["seed"] = spawned[s][k]
            if data["problem"].get("data_seed") is None:
                data["problem"]["data_seed"] = s
            cells.append((s, ExperimentConfig.model_validate(data)))
    return cells


def expand_grid(grid: GridConfig) -> List[ExperimentConfig]:
    """
    One ExperimentConfig per (optimizer, rule, attack, seed), in that nesting order.

    Each cell gets its own oracle and attack seed spawned from the grid seed;
    the problem data and start stay keyed by the grid seed so cells compare
    methods on the same instance. label_flip is dropped for problems without labels.
    """
    return [cfg for _, cfg in _expand(grid)]


def _load_finished(cell_dir: str) -> Optional[CellResult]:
    path = os.path.join(cell_dir, config.SUMMARY_FILE)
    if not os.path.exists(path):
        return None
    try:
        with open(path) as f:
            result = CellResult.model_validate(json.load(f))
    except (OSError, ValueError) as e:
        logger.warning(f"ignoring unreadable summary {path}: {e}")
        return None
    return result if result.status == "ok" else None


def _run_cell(cfg: ExperimentConfig, out_dir: str) -> CellResult:
    cell_dir = os.path.join(out_dir, cfg.name)
    finished = _load_finished(cell_dir)
    if finished is not None:
        logger.info(f"{cfg.name}: already finished, skipping")
        return finished
    try:
        summary, _ = run_experiment(cfg, cell_dir)
        return summary
    except Exception as e:
        logger.error(f"{cfg.name} failed: {e}")
        failed = CellResult(
            name=cfg.name, status="failed", error=f"{type(e).__name__}: {e}",
            optimizer=cfg.optimizer.name, aggregator=cfg.aggregator.rule, attack=cfg.attack.kind,
            seed=cfg.seed, config=cfg.model_dump(by_alias=True),
        )
        os.makedirs(cell_dir, exist_ok=True)
        _write_summary(cell_dir, failed)
        return failed


def summarize_grid(results: Sequence[CellResult]) -> GridSummary:
    """
    Worst-case maximum accuracy per optimizer and rule, plus a cell-by-cell
    comparison against DSGD.

    A (optimizer, rule, grid seed) group counts only when every attack in it
    finished with an accuracy; groups are averaged over grid seeds.
    """
    groups: Dict[Tuple[str, str, Optional[int]], Dict[str, List[float]]] = {}
    incomplete = set()
    accuracy = {}
    for r in results:
        key = (r.optimizer, r.aggregator, r.grid_seed)
        if r.status != "ok" or r.max_accuracy is None:
            incomplete.add(key)
            continue
        groups.setdefault(key, {}).setdefault(r.attack, []).append(r.max_accuracy)
        accuracy[(r.optimizer, r.aggregator, r.attack, r.grid_seed)] = r.max_accuracy

    per_seed: Dict[str, Dict[str, List[float]]] = {}
    for key, by_attack in groups.items():
        if key in incomplete:
            continue
        opt, rule, _ = key
        per_seed.setdefault(opt, {}).setdefault(rule, []).append(worst_case_max_accuracy(by_attack))
    if incomplete:
        logger.info(f"grid: {len(incomplete)} optimizer/rule group(s) left out of the worst case")

    versus: Dict[str, Dict[str, int]] = {}
    for (opt, rule, attack, s), value in accuracy.items():
        reference = accuracy.get(("dsgd", rule, attack, s))
        if opt == "dsgd" or reference is None:
            continue
        entry = versus.setdefault(opt, {"at_least": 0, "cells": 0})
        entry["cells"] += 1
        entry["at_least"] += int(value >= reference)

    return GridSummary(
        cells=list(results),
        worst_case_max_accuracy={
            opt: {rule: float(np.mean(values)) for rule, values in rules.items()}
            for opt, rules in per_seed.items()
        },
        versus_dsgd=versus,
    )


def run_grid(grid: GridConfig, out_dir: str, threads: int = 1) -> List[CellResult]:
    """
    Run every cell of a grid; a failing cell is recorded and the rest continue.

    Cells whose summary already reports success are not rerun. grid.json gets
    every cell plus the worst-case maximum accuracy table.

    Returns:
        One CellResult per cell, in grid order
    """
    os.makedirs(out_dir, exist_ok=True)
    cells = _expand(grid)
    logger.info(f"grid: {len(cells)} cells with {threads} worker(s)")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda c: _run_cell(c[1], out_dir), cells))
    else:
        results = [_run_cell(cfg, out_dir) for _, cfg in cells]
    for (grid_seed, _), result in zip(cells, results):
        result.grid_seed = grid_seed

    failed = sum(r.status == "failed" for r in results)
    if failed:
        logger.warning(f"grid: {failed} of {len(results)} cells failed")
    summary = summarize_grid(results)
    with open(os.path.join(out_dir, config.GRID_FILE), "w") as f:
        json.dump(summary.model_dump(exclude={"cells": {"__all__": {"config"}}}), f, indent=2, default=str)
    return results


def _suite_trial(
    agg_cfg: AggregatorConfig,
    attack_cfgs: Sequence[AttackConfig],
    trial: int,
    dim: int,
    honest: int,
    byzantine: int,
    seed: int,
) -> Tuple[str, RobustnessCheck, Optional[str]]:
    rng = generator(seed, 0, trial, 0x5E)
    center = 5.0 * rng.standard_normal(dim)
    scale = math.exp(rng.uniform(-2.0, 2.0))
    honest_msgs = center + scale * rng.standard_normal((honest, dim))
    attack_cfg = attack_cfgs[trial % len(attack_cfgs)]
    ctx = AttackContext(num_byzantine=byzantine, round_index=trial, seed=seed)
    byz = craft(attack_cfg, honest_msgs, ctx)
    check = check_robustness(agg_cfg, honest_msgs, byz)
    witness = None
    if not check.holds:
        witness = (
            f"honest mean {np.array2string(honest_msgs.mean(axis=0), precision=3, threshold=8)}, "
            f"honest scale {scale:.3g}, byzantine[0] {np.array2string(byz[0], precision=3, threshold=8)}"
        )
    return attack_cfg.kind, check, witness


def robustness_suite(
    trials: int = config.SUITE_TRIALS,
    dim: int = config.SUITE_DIM,
    honest: int = 8,
    byzantine: int = 2,
    delta: float = 0.2,
    rules: Optional[Sequence[str]] = None,
    attacks: Optional[Sequence[str]] = None,
    seed: int = config.DEFAULT_SEED,
    threads: int = 1,
) -> List[SuiteResult]:
    """
    Check the robustness inequality of each rule on randomized honest inputs.

    Honest inputs are Gaussian clouds with random centers and scales; the
    Byzantine inputs come from the attacks, cycled over the trials. Trials run
    in chunks on a thread pool and are merged in trial order, so the report
    does not depend on the thread count. Every violation is logged with its witness.

    Raises:
        ValueError: If label_flip is requested (the inputs carry no labels)
    """
    rules = list(rules or config.ROBUST_RULES)
    attacks = list(attacks or config.LABEL_FREE_ATTACKS)
    if "label_flip" in attacks:
        raise ValueError("label_flip needs labeled data; the suite draws unlabeled Gaussian inputs")
    attack_cfgs = [AttackConfig(kind=a) for a in attacks]
    chunks = [range(s, min(s + config.SUITE_CHUNK, trials)) for s in range(0, trials, config.SUITE_CHUNK)]

    results = []
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        for rule in rules:
            agg_cfg = AggregatorConfig(rule=rule, delta=delta)
            build_aggregator(agg_cfg, honest)
            report = SuiteResult(
                rule=rule, trials=trials, holds=0, rho_delta=robustness_coefficient(rule, delta, honest),
            )
            run_chunk = lambda chunk: [
                _suite_trial(agg_cfg, attack_cfgs, t, dim, honest, byzantine, seed) for t in chunk
            ]
            for chunk, outcomes in zip(chunks, pool.map(run_chunk, chunks)):
                for trial, (attack, check, witness) in zip(chunk, outcomes):
                    if check.precondition_ok is False:
                        report.precondition_failures += 1
                    if check.holds:
                        report.holds += 1
                    else:
                        report.violations[attack] = report.violations.get(attack, 0) + 1
                        report.witness_trials.append(trial)
                        logger.warning(
                            f"{rule} violated under {attack} at trial {trial}: "
                            f"lhs={check.lhs:.4g} rhs={check.rhs:.4g}; {witness}"
                        )
                    if check.rhs > 0:
                        report.worst_ratio = max(report.worst_ratio, check.lhs / check.rhs)
            logger.info(f"{rule}: {report.holds}/{trials} trials within the bound")
            results.append(report)
    return results
