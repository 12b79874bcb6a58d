import math

import numpy as np
import pytest

from schema import ByrdNesterParams
from simulator.optimizers import (
    ScheduleError,
    byrd_nester_round,
    init_byrd_nester,
    nonconvex_defaults,
    prox_params,
    renester_schedule,
    run_byrd_nester,
    run_byrd_renester,
    run_dsgd,
    run_dsgdm,
    run_inexact_prox,
    strongly_convex_defaults,
)
from simulator.problems import cosine_wells_problem, random_quadratic_problem


def test_byrd_nester_query_accounting(quadratic, cluster_factory):
    rng = np.random.default_rng(0)
    for trial in range(20):
        cluster = cluster_factory(quadratic, rule="median", delta=0.2, attack="alie", sigma_sq=1.0, seed=trial)
        params = ByrdNesterParams(
            eta=0.05, theta=0.5, beta=0.5, alpha=float(rng.uniform()),
            m=int(rng.integers(1, 6)), m0=int(rng.integers(0, 6)), T=int(rng.integers(1, 15)),
        )
        result = run_byrd_nester(cluster, np.zeros(quadratic.d), params, keep_trajectory=False)
        assert result.queries == params.m0 + params.m * params.T
        assert cluster.ledger.count == params.total_queries


def test_zero_initial_batch_starts_from_zero_estimators(quadratic, cluster_factory):
    cluster = cluster_factory(quadratic, sigma_sq=1.0)
    params = ByrdNesterParams(eta=0.1, m=2, m0=0, T=1)
    state = init_byrd_nester(cluster, np.ones(quadratic.d), params)
    assert np.array_equal(state.s_hat, np.zeros(quadratic.d))
    assert cluster.ledger.count == 0


def test_renester_query_accounting(cluster_factory):
    problem = random_quadratic_problem(d=3, L=4.0, mu=1.0, zeta=0.0, honest=8, seed=2)
    cluster = cluster_factory(problem, sigma_sq=1.0, seed=4)
    x0 = np.ones(3)
    schedule = renester_schedule(problem.L, problem.mu, 1.0, problem.delta, problem.n, 0.0, 1.0, math.sqrt(3.0))
    result = run_byrd_renester(cluster, x0, eps=1.0, R=math.sqrt(3.0))
    assert schedule.P > 1
    assert schedule.m_list == [2 ** p for p in range(schedule.P)]
    assert result.queries == schedule.total_queries
    assert cluster.ledger.count == schedule.total_queries
    assert len(result.trajectory) == schedule.P + 1


def test_renester_refuses_schedules_above_the_cap():
    with pytest.raises(ScheduleError):
        renester_schedule(4.0, 1.0, 1.0, 0.0, 8, 0.0, 1e-3, 1.0, query_cap=1000)


def test_strongly_convex_defaults():
    params = strongly_convex_defaults(L=1.0, mu=0.01, sigma_sq=0.0, delta=0.0, n=4, rho_delta=0.0, eps=1e-3, R=1.0)
    assert params.eta == pytest.approx(1.0)
    assert params.beta == pytest.approx(9.0 / 11.0)
    assert params.theta == 1.0 and params.alpha == 0.0
    assert params.q == pytest.approx(100.0)
    assert params.m == params.m0 == 1
    assert params.T == math.ceil(20.0 * math.log(4.0 / 1e-6))
    with pytest.raises(ScheduleError):
        strongly_convex_defaults(1.0, 0.0, 1.0, 0.0, 4, 0.0, 0.1, 1.0)


def test_strongly_convex_batch_size_and_clamp():
    params = strongly_convex_defaults(L=1.0, mu=0.5, sigma_sq=1.0, delta=0.2, n=10, rho_delta=8.0 / 3.0, eps=0.5, R=1.0)
    inv = 1.0 / 8.0
    expected = math.ceil(64 * 2.0 * (3 * (8.0 / 3.0) * (1 + inv) + inv) * 1.0 / 0.25)
    assert params.m == expected
    clamped = strongly_convex_defaults(1.0, 0.5, 1.0, 0.2, 10, 8.0 / 3.0, 0.5, 1.0, query_cap=100)
    assert clamped.clamped
    assert clamped.notes
    assert clamped.m * (clamped.T + 1) <= 100


def test_nonconvex_defaults_sanity():
    rng = np.random.default_rng(11)
    for _ in range(100):
        L = float(rng.uniform(0.1, 10.0))
        params = nonconvex_defaults(
            L=L, delta=float(rng.uniform(0.0, 0.3)), n=int(rng.integers(5, 50)),
            rho_delta=float(rng.uniform(0.0, 10.0)), sigma_sq=float(rng.uniform(0.0, 5.0)),
            T=int(rng.integers(1, 1000)), Delta=float(rng.uniform(0.1, 10.0)),
        )
        assert params.beta == pytest.approx(1.0 - 12.0 * L * params.eta)
        assert params.theta == pytest.approx(1.0 - params.beta)
        assert params.beta >= 0.5 - 1e-12
        assert params.eta <= 1.0 / (24.0 * L) * (1 + 1e-12)
        assert params.alpha == 1.0


def test_linear_rate_envelope(ill_conditioned, cluster_factory):
    problem = ill_conditioned
    cluster = cluster_factory(problem)
    params = strongly_convex_defaults(problem.L, problem.mu, 0.0, 0.0, problem.n, 0.0, 1e-3, 1.0)
    params = params.model_copy(update={"T": 500})
    x0 = np.random.default_rng(5).normal(size=problem.d)
    result = run_byrd_nester(cluster, x0, params)
    gaps = np.array([problem.gap(x) for x in result.trajectory])
    rate = 1.0 - 1.0 / (2.0 * math.sqrt(params.q))
    envelope = 2.0 * rate ** np.arange(len(gaps)) * gaps[0]
    assert np.all(gaps <= envelope)
    contraction = (gaps[500] / gaps[50]) ** (1.0 / 450.0)
    assert contraction <= 1.0 - 1.0 / (4.0 * math.sqrt(params.q))


def _first_below(problem, trajectory, tol):
    for t, x in enumerate(trajectory):
        if problem.gap(x) <= tol:
            return t
    return None


def test_acceleration_beats_dsgd(ill_conditioned, cluster_factory):
    problem = ill_conditioned
    x0 = np.ones(problem.d)
    params = strongly_convex_defaults(problem.L, problem.mu, 0.0, 0.0, problem.n, 0.0, 1e-3, 1.0)
    params = params.model_copy(update={"T": 1500})
    fast = run_byrd_nester(cluster_factory(problem), x0, params).trajectory
    slow = run_dsgd(cluster_factory(problem), x0, 1.0 / problem.L, 1, 1500).trajectory
    t_fast = _first_below(problem, fast, 1e-6)
    t_slow = _first_below(problem, slow, 1e-6)
    assert t_fast is not None and t_slow is not None
    assert 3 * t_fast <= t_slow


def test_dsgd_and_dsgdm_converge_without_attack(quadratic, cluster_factory):
    x0 = np.ones(quadratic.d)
    for result in (
        run_dsgd(cluster_factory(quadratic), x0, 0.1, 1, 300),
        run_dsgdm(cluster_factory(quadratic), x0, 0.1, 0.5, 1, 300),
    ):
        assert np.linalg.norm(quadratic.full_gradient(result.final)) < 1e-6
        assert len(result.trajectory) == 301


def test_ideal_rule_has_no_aggregation_bias(quadratic, cluster_factory):
    cluster = cluster_factory(quadratic, sigma_sq=1.0, diagnostics=True)
    params = ByrdNesterParams(eta=0.05, theta=0.3, beta=0.7, alpha=0.4, m=2, m0=2, T=10)
    deltas = []
    run_byrd_nester(cluster, np.ones(quadratic.d), params,
                    observer=lambda s: deltas.append((s.delta1, s.delta2)), keep_trajectory=False)
    assert len(deltas) == 10
    assert all(d1 <= 1e-10 for d1, _ in deltas)
    assert all(d2 > 0 for _, d2 in deltas)


def test_nonconvex_output_is_a_seeded_iterate(quadratic, cluster_factory):
    params = ByrdNesterParams(eta=0.05, theta=0.5, beta=0.5, alpha=1.0, m=1, m0=1, T=20)
    a = run_byrd_nester(cluster_factory(quadratic, sigma_sq=0.5, seed=3), np.ones(5), params, output_mode="nonconvex")
    b = run_byrd_nester(cluster_factory(quadratic, sigma_sq=0.5, seed=3), np.ones(5), params, output_mode="nonconvex")
    assert 0 <= a.metadata["output_index"] < 20
    assert np.array_equal(a.final, b.final)
    with pytest.raises(ValueError):
        run_byrd_nester(cluster_factory(quadratic), np.ones(5), params, output_mode="bogus")


def test_attack_run_is_reproducible(quadratic, cluster_factory):
    params = ByrdNesterParams(eta=0.05, theta=0.5, beta=0.5, alpha=0.5, m=3, m0=3, T=15)
    runs = [
        run_byrd_nester(cluster_factory(quadratic, rule="trimmed_mean", delta=0.2, attack="gaussian",
                                        sigma_sq=1.0, seed=9), np.ones(5), params).trajectory
        for _ in range(2)
    ]
    assert all(np.array_equal(a, b) for a, b in zip(*runs))


def test_prox_params():
    p = prox_params(L=2.0, Delta=1.0, eps=0.5)
    assert p.Gamma == 256
    assert p.prox_weight == 2.0
    assert prox_params(2.0, 1.0, 1e-3, max_outer=50).clamped


def test_inexact_prox_on_nonconvex_wells(cluster_factory):
    problem = cosine_wells_problem(2, amplitude=0.5, frequency=2.0, zeta=0.3, honest=4, seed=1)
    cluster = cluster_factory(problem, sigma_sq=0.01, seed=2)
    x0 = np.full(2, 2.0)
    result = run_inexact_prox(cluster, x0, eps=0.5, Delta=1.0, Gamma=3)
    assert len(result.trajectory) == 4
    assert len(result.metadata["grad_sq"]) == 3
    assert 1 <= result.metadata["output_index"] <= 3
    assert result.queries == cluster.ledger.count
    assert problem.value(result.trajectory[-1]) < problem.value(x0)


def test_step_size_must_be_positive(quadratic, cluster_factory):
    with pytest.raises(ValueError):
        run_dsgd(cluster_factory(quadratic), np.ones(5), 0.0, 1, 3)


def test_dsgdm_without_momentum_is_dsgd(quadratic, cluster_factory):
    x0 = np.ones(quadratic.d)
    plain = run_dsgd(cluster_factory(quadratic, rule="median", delta=0.2, attack="alie", sigma_sq=1.0, seed=5),
                     x0, 0.05, 3, 40).trajectory
    heavy = run_dsgdm(cluster_factory(quadratic, rule="median", delta=0.2, attack="alie", sigma_sq=1.0, seed=5),
                      x0, 0.05, 0.0, 3, 40).trajectory
    assert all(np.array_equal(a, b) for a, b in zip(plain, heavy))


def test_byrd_nester_without_momentum_is_dsgd(quadratic, cluster_factory):
    x0 = np.ones(quadratic.d)
    params = ByrdNesterParams(eta=0.05, theta=1.0, beta=0.0, alpha=0.0, m=2, m0=0, T=40)
    nester = run_byrd_nester(
        cluster_factory(quadratic, rule="trimmed_mean", delta=0.2, attack="sign_flip", sigma_sq=1.0, seed=6),
        x0, params,
    ).trajectory
    plain = run_dsgd(
        cluster_factory(quadratic, rule="trimmed_mean", delta=0.2, attack="sign_flip", sigma_sq=1.0, seed=6),
        x0, 0.05, 2, 40,
    ).trajectory
    assert len(nester) == len(plain) == 41
    assert all(np.array_equal(a, b) for a, b in zip(nester, plain))


def test_extrapolation_point(quadratic, cluster_factory):
    cluster = cluster_factory(quadratic, rule="geometric_median", delta=0.2, attack="ipm", sigma_sq=1.0, seed=7)
    params = ByrdNesterParams(eta=0.05, theta=0.4, beta=0.6, alpha=0.3, m=2, m0=2, T=25)
    state = init_byrd_nester(cluster, np.ones(quadratic.d), params)
    for _ in range(params.T):
        byrd_nester_round(state, cluster, params)
        assert np.array_equal(state.y, state.x + params.beta * (state.x - state.x_prev))


def test_renester_ledger_over_random_parameters(cluster_factory):
    rng = np.random.default_rng(11)
    for trial in range(15):
        L = float(rng.uniform(1.0, 8.0))
        mu = L / float(rng.uniform(1.0, 9.0))
        sigma_sq = float(rng.uniform(0.1, 1.0))
        eps = float(rng.uniform(0.5, 2.0))
        R = float(rng.uniform(0.5, 2.0))
        problem = random_quadratic_problem(d=3, L=L, mu=mu, zeta=0.0, honest=8, seed=trial)
        cluster = cluster_factory(problem, sigma_sq=sigma_sq, seed=trial)

        schedule = renester_schedule(problem.L, problem.mu, sigma_sq, problem.delta, problem.n, 0.0, eps, R)
        result = run_byrd_renester(cluster, np.ones(3), eps=eps, R=R)

        assert schedule.m_list == [2 ** p for p in range(schedule.P)]
        assert len(set(schedule.T_list[1:])) <= 1
        assert result.queries == schedule.total_queries == sum(T * m for T, m in zip(schedule.T_list, schedule.m_list))
        expected = [m for T, m in zip(schedule.T_list, schedule.m_list) for _ in range(T)]
        assert cluster.ledger.per_round == expected
