"""
Server/node update rules: DSGD, DSGDm, Byrd-Nester, its restart scheme and the
inexact proximal point wrapper, with their parameter schedules.

Honest messages are always stacked before Byzantine ones and reduced in node
order, so a run is reproducible regardless of worker count.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Callable, List, Dict, Any, Tuple

import numpy as np
from loguru import logger

import config
from schema import AttackConfig, ByrdNesterParams, RestartSchedule, ProxParams
from .problems import ProblemSpec, ProximalLoss
from .oracles import Oracle
from .aggregators import stable_mean
from .attacks import AttackContext, craft


class ScheduleError(ValueError):
    """A parameter schedule cannot be realized."""


@dataclass
class Cluster:
    """Everything one simulated round needs: problem, oracle, rule and adversary."""

    problem: ProblemSpec
    oracle: Oracle
    aggregator: Callable[[np.ndarray, Optional[int]], np.ndarray]
    attack: AttackConfig = field(default_factory=AttackConfig)
    seed: int = config.DEFAULT_SEED
    diagnostics: bool = False
    rho_delta: Optional[float] = None

    def __post_init__(self):
        if self.attack.kind == "label_flip" and self.num_byzantine > 0 and not self.problem.has_labels:
            raise ValueError(f"label_flip needs a labeled problem, {self.problem.name} has no labels")

    @property
    def ledger(self):
        return self.oracle.ledger

    @property
    def honest_count(self) -> int:
        return self.problem.honest_count

    @property
    def num_byzantine(self) -> int:
        return self.problem.num_byzantine

    def robustness(self) -> float:
        """rho * delta of the aggregator, or the configured override."""
        if self.rho_delta is not None:
            return self.rho_delta
        rho_delta = getattr(self.aggregator, "rho_delta", None)
        return rho_delta(self.honest_count) if callable(rho_delta) else 0.0

    def rebind(self, problem: ProblemSpec) -> "Cluster":
        return replace(self, problem=problem, oracle=self.oracle.rebind(problem))


@dataclass
class OptimizerState:
    """Server iterates (x, y, s_hat) and per-node estimators."""

    x: np.ndarray
    y: np.ndarray
    x_prev: np.ndarray
    s_hat: np.ndarray
    s_nodes: np.ndarray
    s_byz: np.ndarray
    t: int = 0
    deviation: float = math.nan
    delta1: float = math.nan
    delta2: float = math.nan


@dataclass
class RunResult:
    final: np.ndarray
    trajectory: List[np.ndarray]
    queries: int
    state: Optional[OptimizerState] = None
    metadata: Dict[str, Any] = field(default_factory=dict)


Observer = Callable[[OptimizerState], None]


def init_state(x0: np.ndarray, honest: int, byzantine: int) -> OptimizerState:
    x0 = np.array(x0, dtype=np.float64)
    d = x0.shape[0]
    return OptimizerState(
        x=x0.copy(), y=x0.copy(), x_prev=x0.copy(), s_hat=np.zeros(d),
        s_nodes=np.zeros((honest, d)), s_byz=np.zeros((byzantine, d)),
    )


def _poisoned(cluster: Cluster, point: np.ndarray, m: int, round_id: int) -> Optional[np.ndarray]:
    if cluster.attack.kind != "label_flip" or cluster.num_byzantine == 0:
        return None
    losses = [cluster.problem.poisoned_loss(k) for k in range(cluster.num_byzantine)]
    return cluster.oracle.byzantine_minibatches(losses, point, m, round_id)


def _exchange(
    cluster: Cluster,
    honest: np.ndarray,
    stream: str,
    round_id: int,
    poisoned: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, float]:
    """Craft Byzantine uploads, aggregate, and report ||w - honest mean||."""
    ctx = AttackContext(
        num_byzantine=cluster.num_byzantine, round_index=round_id,
        seed=cluster.seed, stream=stream, poisoned=poisoned,
    )
    byz = craft(cluster.attack, honest, ctx)
    w = cluster.aggregator(np.vstack([honest, byz]), honest.shape[0])
    return w, float(np.linalg.norm(w - stable_mean(honest)))


def dsgd_step(state: OptimizerState, cluster: Cluster, eta: float, m: int) -> OptimizerState:
    """x <- x - eta * A({g_i}) with g_i a mini-batch gradient at x."""
    if eta <= 0:
        raise ValueError("step size must be positive")
    r = cluster.ledger.next_round()
    grads = cluster.oracle.honest_minibatches(state.x, m, r)
    w, state.deviation = _exchange(cluster, grads, "g", r, _poisoned(cluster, state.x, m, r))
    state.x_prev = state.x
    state.x = state.x - eta * w
    state.y = state.x
    state.t += 1
    return state


def dsgdm_step(
    state: OptimizerState, cluster: Cluster, eta: float, momentum: float, m: int
) -> OptimizerState:
    """Node momentum s_i <- b s_i + (1 - b) g_i; server steps along A({s_i})."""
    if eta <= 0:
        raise ValueError("step size must be positive")
    r = cluster.ledger.next_round()
    grads = cluster.oracle.honest_minibatches(state.x, m, r)
    state.s_nodes = momentum * state.s_nodes + (1.0 - momentum) * grads
    poisoned = _poisoned(cluster, state.x, m, r)
    if poisoned is not None:
        state.s_byz = momentum * state.s_byz + (1.0 - momentum) * poisoned
        poisoned = state.s_byz
    w, state.deviation = _exchange(cluster, state.s_nodes, "g", r, poisoned)
    state.x_prev = state.x
    state.x = state.x - eta * w
    state.y = state.x
    state.t += 1
    return state


def init_byrd_nester(cluster: Cluster, x0: np.ndarray, params: ByrdNesterParams) -> OptimizerState:
    """y0 = x0; s_hat0 = s_i0 = batch-m0 gradient at y0 (zeros when m0 = 0)."""
    state = init_state(x0, cluster.honest_count, cluster.num_byzantine)
    if params.m0 == 0:
        return state
    r = cluster.ledger.next_round()
    state.s_nodes = cluster.oracle.honest_minibatches(state.y, params.m0, r)
    poisoned = _poisoned(cluster, state.y, params.m0, r)
    if poisoned is not None:
        state.s_byz = poisoned
    state.s_hat, _ = _exchange(cluster, state.s_nodes, "s", r, poisoned)
    return state


def byrd_nester_round(state: OptimizerState, cluster: Cluster, params: ByrdNesterParams) -> OptimizerState:
    """
    One Byrd-Nester round.

    g_i = minibatch(y_prev, m); s_i = beta s_i + theta g_i;
    s = beta s_hat + theta A(g); s_hat = (1 - alpha) s + alpha A(s_i);
    x = x - eta s_hat; y = x + beta (x - x_prev).
    """
    beta, theta, alpha = params.beta, params.theta, params.alpha
    y_prev = state.y
    r = cluster.ledger.next_round()
    grads = cluster.oracle.honest_minibatches(y_prev, params.m, r)
    state.s_nodes = beta * state.s_nodes + theta * grads

    poisoned_g = _poisoned(cluster, y_prev, params.m, r)
    poisoned_s = None
    if poisoned_g is not None:
        state.s_byz = beta * state.s_byz + theta * poisoned_g
        poisoned_s = state.s_byz

    agg_g, state.deviation = _exchange(cluster, grads, "g", r, poisoned_g)
    agg_s, _ = _exchange(cluster, state.s_nodes, "s", r, poisoned_s)
    s_server = beta * state.s_hat + theta * agg_g
    state.s_hat = (1.0 - alpha) * s_server + alpha * agg_s

    if cluster.diagnostics:
        s_bar = state.s_nodes.mean(axis=0)
        state.delta1 = float(np.linalg.norm(state.s_hat - s_bar))
        state.delta2 = theta * float(np.linalg.norm(grads.mean(axis=0) - cluster.problem.full_gradient(y_prev)))

    state.x_prev = state.x
    state.x = state.x - params.eta * state.s_hat
    state.y = state.x + beta * (state.x - state.x_prev)
    state.t += 1
    return state


def _output_index(seed: int, T: int, salt: int) -> int:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, salt])))
    return int(rng.integers(0, T))


def run_dsgd(
    cluster: Cluster,
    x0: np.ndarray,
    eta: float,
    m: int,
    T: int,
    observer: Optional[Observer] = None,
    keep_trajectory: bool = True,
) -> RunResult:
    """T DSGD steps from x0; returns x_T."""
    state = init_state(x0, cluster.honest_count, cluster.num_byzantine)
    trajectory = [state.x.copy()] if keep_trajectory else []
    start = cluster.ledger.count
    for _ in range(T):
        dsgd_step(state, cluster, eta, m)
        if keep_trajectory:
            trajectory.append(state.x.copy())
        if observer:
            observer(state)
    return RunResult(state.x.copy(), trajectory, cluster.ledger.count - start, state)


def run_dsgdm(
    cluster: Cluster,
    x0: np.ndarray,
    eta: float,
    momentum: float,
    m: int,
    T: int,
    observer: Optional[Observer] = None,
    keep_trajectory: bool = True,
) -> RunResult:
    """T DSGDm steps from x0 with zero-initialized momentum; returns x_T."""
    state = init_state(x0, cluster.honest_count, cluster.num_byzantine)
    trajectory = [state.x.copy()] if keep_trajectory else []
    start = cluster.ledger.count
    for _ in range(T):
        dsgdm_step(state, cluster, eta, momentum, m)
        if keep_trajectory:
            trajectory.append(state.x.copy())
        if observer:
            observer(state)
    return RunResult(state.x.copy(), trajectory, cluster.ledger.count - start, state)


def run_byrd_nester(
    cluster: Cluster,
    x0: np.ndarray,
    params: ByrdNesterParams,
    output_mode: str = "strongly_convex",
    observer: Optional[Observer] = None,
    keep_trajectory: bool = True,
) -> RunResult:
    """
    Run Byrd-Nester for params.T rounds.

    Args:
        cluster: Problem, oracle, aggregator and attack
        x0: Starting point
        params: Step size, weights, batch sizes and round count
        output_mode: "strongly_convex" returns x_T; "nonconvex" returns y_t'
            for t' drawn uniformly from 0..T-1 with the cluster seed
        observer: Called with the state after every round
        keep_trajectory: Store x_0..x_T

    Returns:
        RunResult whose queries equal m0 + m * T
    """
    if output_mode not in ("strongly_convex", "nonconvex"):
        raise ValueError(f"Unknown output mode: {output_mode}")
    start = cluster.ledger.count
    state = init_byrd_nester(cluster, x0, params)
    trajectory = [state.x.copy()] if keep_trajectory else []
    pick = _output_index(cluster.seed, params.T, 0x0C7) if output_mode == "nonconvex" else -1
    picked = state.y.copy() if pick == 0 else None

    for t in range(1, params.T + 1):
        byrd_nester_round(state, cluster, params)
        if keep_trajectory:
            trajectory.append(state.x.copy())
        if t == pick:
            picked = state.y.copy()
        if observer:
            observer(state)

    final = state.x.copy() if output_mode == "strongly_convex" else picked
    metadata = {"output_index": pick} if output_mode == "nonconvex" else {}
    return RunResult(final, trajectory, cluster.ledger.count - start, state, metadata)


def _noise_factor(delta: float, n: int, rho_delta: float) -> float:
    inv = 1.0 / ((1.0 - delta) * n)
    return 3.0 * rho_delta * (1.0 + inv) + inv


def _log_rounds(kappa: float, ratio: float) -> int:
    """ceil(2 sqrt(kappa) ln(ratio)), at least 1."""
    if not ratio > 1.0:
        return 1
    return max(int(math.ceil(2.0 * math.sqrt(kappa) * math.log(ratio))), 1)


def strongly_convex_defaults(
    L: float,
    mu: float,
    sigma_sq: float,
    delta: float,
    n: int,
    rho_delta: float,
    eps: float,
    R: float,
    query_cap: int = config.QUERY_CAP,
) -> ByrdNesterParams:
    """
    Byrd-Nester parameters for a mu-strongly convex problem.

    alpha = 0, theta = 1, q = kappa, beta = (sqrt(kappa) - 1) / (sqrt(kappa) + 1), eta = 1/L,
    T = ceil(2 sqrt(kappa) ln(4 L^2 R^2 / eps^2)),
    m = m0 = ceil(64 kappa (3 rho delta (1 + 1/((1-delta) n)) + 1/((1-delta) n)) sigma^2 / eps^2).

    Raises:
        ScheduleError: If mu <= 0
    """
    if mu <= 0:
        raise ScheduleError("strongly convex schedule needs mu > 0")
    kappa = L / mu
    beta = (math.sqrt(kappa) - 1.0) / (math.sqrt(kappa) + 1.0)
    T = _log_rounds(kappa, 4.0 * L ** 2 * R ** 2 / eps ** 2)
    m = max(int(math.ceil(64.0 * kappa * _noise_factor(delta, n, rho_delta) * sigma_sq / eps ** 2)), 1)

    notes = []
    clamped = False
    if m * (T + 1) > query_cap:
        clamped = True
        if T + 1 > query_cap:
            notes.append(f"T clamped from {T} to {query_cap - 1}")
            T = query_cap - 1
        new_m = max(query_cap // (T + 1), 1)
        notes.append(f"m clamped from {m} to {new_m} by the query cap {query_cap}")
        m = new_m
        logger.warning("; ".join(notes))
    return ByrdNesterParams(
        eta=1.0 / L, theta=1.0, beta=beta, alpha=0.0, m=m, m0=m, T=T, q=kappa,
        clamped=clamped, notes=notes,
    )


def nonconvex_defaults(
    L: float,
    delta: float,
    n: int,
    rho_delta: float,
    sigma_sq: float,
    T: int,
    Delta: float,
    m: int = 1,
    query_cap: int = config.QUERY_CAP,
) -> ByrdNesterParams:
    """
    Byrd-Nester parameters for a non-convex L-smooth problem.

    eta = min(sqrt((Delta + sigma^2/(L (1-delta) n m)) / (T (1/((1-delta) n) + rho delta (1 + 1/((1-delta) n))) L sigma^2 / m)), 1/(24 L)),
    beta = 1 - 12 L eta, theta = 1 - beta, alpha = 1, m0 = ceil(m / (L eta)^2).
    """
    if T < 1:
        raise ScheduleError("T must be at least 1")
    cap = 1.0 / (24.0 * L)
    inv = 1.0 / ((1.0 - delta) * n)
    if sigma_sq > 0:
        num = Delta + sigma_sq / (L * (1.0 - delta) * n * m)
        den = T * (inv + rho_delta * (1.0 + inv)) * L * sigma_sq / m
        eta = min(math.sqrt(num / den), cap)
    else:
        eta = cap

    notes = []
    beta = 1.0 - 12.0 * L * eta
    if beta < 0.5:
        notes.append(f"eta clamped from {eta:.4g} to {cap:.4g} to keep beta >= 1/2")
        logger.warning(notes[-1])
        eta = cap
        beta = 1.0 - 12.0 * L * eta
    theta = 1.0 - beta

    m0 = max(int(math.ceil(m / (L ** 2 * eta ** 2))), 1)
    clamped = False
    if m0 + m * T > query_cap:
        clamped = True
        new_m0 = max(query_cap - m * T, 1)
        notes.append(f"m0 clamped from {m0} to {new_m0} by the query cap {query_cap}")
        logger.warning(notes[-1])
        m0 = new_m0
    return ByrdNesterParams(
        eta=eta, theta=theta, beta=beta, alpha=1.0, m=m, m0=m0, T=T,
        clamped=clamped, notes=notes,
    )


def renester_schedule(
    L: float,
    mu: float,
    sigma_sq: float,
    delta: float,
    n: int,
    rho_delta: float,
    eps: float,
    R: float,
    query_cap: int = config.QUERY_CAP,
) -> RestartSchedule:
    """
    Per-call rounds and batch sizes of Byrd-reNester.

    Raises:
        ScheduleError: If the schedule needs more than query_cap queries
    """
    if mu <= 0:
        raise ScheduleError("restart schedule needs mu > 0")
    kappa = L / mu
    T_full = _log_rounds(kappa, 4.0 * L ** 2 * R ** 2 / eps ** 2)
    eps1_sq = 32.0 / mu * _noise_factor(delta, n, rho_delta) * sigma_sq

    if eps1_sq == 0.0:
        schedule = RestartSchedule(eps1_sq=0.0, T_list=[T_full], m_list=[1], P=1)
    else:
        P = max(int(math.ceil(math.log2(4.0 * L * eps1_sq / eps ** 2))), 1)
        if P > 62:
            raise ScheduleError(f"restart schedule needs {P} calls; eps={eps:g} is too small")
        T1 = min(_log_rounds(kappa, 2.0 * L * R ** 2 / eps1_sq), T_full)
        Tp = _log_rounds(kappa, 8.0)
        schedule = RestartSchedule(
            eps1_sq=eps1_sq,
            T_list=[T1] + [Tp] * (P - 1),
            m_list=[2 ** p for p in range(P)],
            P=P,
        )

    if schedule.total_queries > query_cap:
        raise ScheduleError(
            f"restart schedule needs {schedule.total_queries} queries "
            f"(P={schedule.P}, eps1^2={schedule.eps1_sq:.3g}) above the cap {query_cap}"
        )
    return schedule


def run_byrd_renester(
    cluster: Cluster,
    x0: np.ndarray,
    eps: float,
    R: float,
    query_cap: int = config.QUERY_CAP,
    observer: Optional[Observer] = None,
) -> RunResult:
    """
    Byrd-Nester with restarts: call p runs T(p) rounds with batch 2^(p-1) from the previous output.

    Each call starts from zero estimators, so the ledger grows by exactly sum_p m(p) T(p).
    """
    problem = cluster.problem
    schedule = renester_schedule(
        problem.L, problem.mu, cluster.oracle.spec.sigma_sq, problem.delta, problem.n,
        cluster.robustness(), eps, R, query_cap,
    )
    kappa = problem.L / problem.mu
    beta = (math.sqrt(kappa) - 1.0) / (math.sqrt(kappa) + 1.0)
    logger.debug(f"restart schedule: P={schedule.P}, T={schedule.T_list}, m={schedule.m_list}")

    start = cluster.ledger.count
    x = np.array(x0, dtype=np.float64)
    trajectory = [x.copy()]
    for T, m in zip(schedule.T_list, schedule.m_list):
        params = ByrdNesterParams(
            eta=1.0 / problem.L, theta=1.0, beta=beta, alpha=0.0, m=m, m0=0, T=T, q=kappa
        )
        x = run_byrd_nester(cluster, x, params, observer=observer, keep_trajectory=False).final
        trajectory.append(x.copy())
    return RunResult(
        x, trajectory, cluster.ledger.count - start, metadata={"schedule": schedule.model_dump()}
    )


def prox_params(L: float, Delta: float, eps: float, max_outer: int = config.MAX_PROX_OUTER) -> ProxParams:
    """Gamma = ceil(32 L Delta / eps^2), clamped to max_outer."""
    Gamma = max(int(math.ceil(32.0 * L * Delta / eps ** 2)), 1)
    clamped = Gamma > max_outer
    if clamped:
        logger.warning(f"Gamma={Gamma} clamped to {max_outer}")
        Gamma = max_outer
    return ProxParams(Gamma=Gamma, prox_weight=L, clamped=clamped)


def surrogate_problem(problem: ProblemSpec, center: np.ndarray) -> ProblemSpec:
    """f_i(z) + L ||z - center||^2 on every honest node; curvature lies in [L, 3L]."""
    L = problem.L
    losses = [ProximalLoss(loss, center, L) for loss in problem.losses]
    return problem.with_losses(losses, L=3.0 * L, mu=L, name=f"{problem.name}+prox")


def run_inexact_prox(
    cluster: Cluster,
    x0: np.ndarray,
    eps: float,
    Delta: float,
    Gamma: Optional[int] = None,
    query_cap: int = config.QUERY_CAP,
    max_outer: int = config.MAX_PROX_OUTER,
) -> RunResult:
    """
    Inexact proximal point method with Byrd-reNester as the inner solver.

    Args:
        cluster: Problem (L-smooth, possibly non-convex), oracle, aggregator and attack
        x0: Starting point
        eps: Target gradient norm
        Delta: Estimate of f(x0) - f*
        Gamma: Outer iteration override; derived from Delta when omitted
        query_cap: Cap of each inner restart schedule
        max_outer: Clamp on Gamma

    Returns:
        RunResult with the center at a seeded uniform gamma' in 1..Gamma;
        metadata["grad_sq"] holds ||grad f(center)||^2 for every center
    """
    problem = cluster.problem
    params = prox_params(problem.L, Delta, eps, max_outer)
    if Gamma is not None:
        params = ProxParams(Gamma=Gamma, prox_weight=problem.L, clamped=False)
    pick = _output_index(cluster.seed, params.Gamma, 0x9407) + 1
    inner_eps = eps * math.sqrt(6.0 / 40.0)

    start = cluster.ledger.count
    center = np.array(x0, dtype=np.float64)
    trajectory = [center.copy()]
    grad_sq = []
    chosen = center.copy()
    for gamma in range(1, params.Gamma + 1):
        grad = problem.full_gradient(center)
        R = max(float(np.linalg.norm(grad)) / problem.L, 1e-12)
        inner = cluster.rebind(surrogate_problem(problem, center))
        center = run_byrd_renester(inner, center, inner_eps, R, query_cap).final
        trajectory.append(center.copy())
        g = problem.full_gradient(center)
        grad_sq.append(float(np.dot(g, g)))
        if gamma == pick:
            chosen = center.copy()
        logger.debug(f"prox outer {gamma}/{params.Gamma}: ||grad f||^2={grad_sq[-1]:.3e}")

    return RunResult(
        chosen, trajectory, cluster.ledger.count - start,
        metadata={"Gamma": params.Gamma, "output_index": pick, "grad_sq": grad_sq, "clamped": params.clamped},
    )
