"""Shared fixtures for the simulator tests."""

import numpy as np
import pytest

from schema import AggregatorConfig, AttackConfig, OracleSpec
from simulator.problems import ProblemSpec, random_quadratic_problem
from simulator.oracles import Oracle
from simulator.aggregators import build_aggregator
from simulator.optimizers import Cluster


def make_cluster(
    problem: ProblemSpec,
    rule: str = "ideal",
    delta: float = 0.0,
    attack: str = "none",
    sigma_sq: float = 0.0,
    seed: int = 0,
    noise_kind: str = "gaussian_iid",
    diagnostics: bool = False,
) -> Cluster:
    oracle = Oracle(OracleSpec(sigma_sq=sigma_sq, noise_kind=noise_kind, seed=seed), problem)
    aggregator = build_aggregator(AggregatorConfig(rule=rule, delta=delta), problem.honest_count)
    return Cluster(problem, oracle, aggregator, AttackConfig(kind=attack), seed=seed, diagnostics=diagnostics)


@pytest.fixture
def cluster_factory():
    return make_cluster


@pytest.fixture
def quadratic():
    """5-dim heterogeneous quadratic, 8 honest + 2 Byzantine nodes."""
    return random_quadratic_problem(d=5, L=10.0, mu=1.0, zeta=1.0, honest=8, byzantine=2, seed=3)


@pytest.fixture
def ill_conditioned():
    """50-dim quadratic with kappa = 100, minimizer at the origin, no heterogeneity."""
    return random_quadratic_problem(d=50, L=1.0, mu=0.01, zeta=0.0, honest=4, byzantine=0, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
