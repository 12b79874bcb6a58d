"""
Executable lower-bound constructions.

- A pair of one-dimensional problems plus an aggregator that makes them
  indistinguishable, pinning every method above a Byzantine error floor.
- A one-dimensional stochastic problem where a zero-returning aggregator is
  admissible until the batch size crosses an escape threshold.
- A chain function whose coordinates are discovered one at a time through a
  Bernoulli progress oracle.
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Callable, List, Tuple

import numpy as np
from loguru import logger
from scipy.special import erf

import config
from schema import OracleSpec, FloorCheck, ByrdNesterParams
from .problems import ProblemSpec, Loss, lemma1_problem, lemma6_problem
from .oracles import Oracle, generator
from .aggregators import stable_mean
from .optimizers import Cluster, run_dsgd, run_dsgdm, run_byrd_nester


class ConstructionError(RuntimeError):
    """A lower-bound construction behaved differently from its design."""

    def __init__(self, message: str, round_index: Optional[int] = None):
        self.round_index = round_index
        super().__init__(message if round_index is None else f"{message} (first divergent round {round_index})")


Runner = Callable[[Cluster, np.ndarray], List[np.ndarray]]


# ---------------------------------------------------------------------------
# Indistinguishable pair
# ---------------------------------------------------------------------------

class GadgetAggregator:
    """
    Outputs mean + sign * (a_t * alpha_min / 2) * c0 with c0 = rho^{1/2} delta^{1/2} zeta.

    a_t is the total weight of fresh gradients inside the messages, read off
    their spread. Outputs are rounded to a 2^-k grid so that both problems
    yield bit-identical values.
    """

    def __init__(self, gadget: "Lemma1Gadget", sign: float):
        self.gadget = gadget
        self.sign = sign
        self.certificates: List[Tuple[float, float]] = []

    def __call__(self, inputs, honest_count=None) -> np.ndarray:
        g = self.gadget
        inputs = np.asarray(inputs, dtype=np.float64)
        center = stable_mean(inputs)
        spread = float(np.mean(np.sum((inputs - center) ** 2, axis=1)))
        frac = g.shifted_nodes / g.n
        weight = 0.0
        if g.zeta > 0 and 0 < frac < 1:
            weight = math.sqrt(spread * g.delta / (frac * (1.0 - frac) * g.zeta ** 2))
        offset = self.sign * weight * g.alpha_min / 2.0 * g.c0
        if offset == 0.0:
            out = center
        else:
            grid = float(2 ** config.GADGET_GRID_BITS)
            out = np.round((center + offset) * grid) / grid

        lhs = float(np.sum((out - center) ** 2))
        rhs = g.rho * g.delta * spread
        self.certificates.append((lhs, rhs))
        if lhs > rhs * (1.0 + 1e-6) + 1e-18:
            logger.warning(f"gadget certificate failed: lhs={lhs:.3e} rhs={rhs:.3e}")
        return out


@dataclass
class Lemma1Gadget:
    """Two problems whose node gradients differ by the constant alpha_min * c0."""

    delta: float
    zeta: float
    rho: float
    alpha_min: float
    n: int
    problem_pair: Tuple[ProblemSpec, ProblemSpec]
    signs: Tuple[float, float] = (1.0, -1.0)

    @property
    def shifted_nodes(self) -> int:
        return int(math.floor(self.delta * self.n + 1e-9))

    @property
    def c0(self) -> float:
        return math.sqrt(self.rho) * math.sqrt(self.delta) * self.zeta

    @property
    def floor_bound(self) -> float:
        return self.alpha_min / 2.0 * self.c0

    def aggregator(self, which: int) -> GadgetAggregator:
        return GadgetAggregator(self, self.signs[which])

    def swapped(self) -> "Lemma1Gadget":
        return Lemma1Gadget(
            self.delta, self.zeta, self.rho, self.alpha_min, self.n,
            (self.problem_pair[1], self.problem_pair[0]), (self.signs[1], self.signs[0]),
        )


def make_lemma1_gadget(
    delta: float = 0.25,
    zeta: float = 1.0,
    rho: float = 4.0,
    alpha_min: float = 1.0,
    n: int = 8,
) -> Lemma1Gadget:
    """Build the problem pair; floor(delta * n) nodes carry the shifted gradient."""
    if not 0 < delta < 0.5:
        raise ValueError("delta must lie in (0, 0.5)")
    first = lemma1_problem(delta, zeta, n)
    second = lemma1_problem(delta, zeta, n, second=True, rho=rho, alpha_min=alpha_min)
    return Lemma1Gadget(delta, zeta, rho, alpha_min, n, (first, second))


def gadget_cluster(gadget: Lemma1Gadget, which: int, seed: int = config.DEFAULT_SEED) -> Cluster:
    problem = gadget.problem_pair[which]
    oracle = Oracle(OracleSpec(sigma_sq=0.0, seed=seed), problem)
    return Cluster(problem, oracle, gadget.aggregator(which), seed=seed)


def dsgd_runner(eta: float = 0.5, T: int = 200, m: int = 1) -> Runner:
    return lambda cluster, x0: run_dsgd(cluster, x0, eta, m, T).trajectory


def dsgdm_runner(eta: float = 0.5, momentum: float = 0.5, T: int = 200, m: int = 1) -> Runner:
    return lambda cluster, x0: run_dsgdm(cluster, x0, eta, momentum, m, T).trajectory


def byrd_nester_runner(params: ByrdNesterParams) -> Runner:
    return lambda cluster, x0: run_byrd_nester(cluster, x0, params).trajectory


def lemma1_floor_check(
    gadget: Lemma1Gadget,
    method_runner: Runner,
    x0: Optional[np.ndarray] = None,
    seed: int = config.DEFAULT_SEED,
) -> FloorCheck:
    """
    Run a method on both problems and confirm it cannot beat the floor.

    Args:
        gadget: The problem pair and its aggregators
        method_runner: (cluster, x0) -> trajectory of iterates
        x0: Start; the origin by default
        seed: Seed shared by both runs

    Returns:
        FloorCheck at the iterate minimizing max_j ||grad f_j||

    Raises:
        ConstructionError: If the two trajectories differ
    """
    x0 = np.zeros(1) if x0 is None else np.asarray(x0, dtype=np.float64)
    runs = [method_runner(gadget_cluster(gadget, j, seed), x0) for j in (0, 1)]
    if len(runs[0]) != len(runs[1]):
        raise ConstructionError("trajectories have different lengths", min(len(runs[0]), len(runs[1])))
    for t, (a, b) in enumerate(zip(*runs)):
        if not np.array_equal(a, b):
            raise ConstructionError("trajectories on the two problems diverged", t)

    p1, p2 = gadget.problem_pair
    norms = np.array([
        (np.linalg.norm(p1.full_gradient(x)), np.linalg.norm(p2.full_gradient(x))) for x in runs[0]
    ])
    best = int(np.argmin(norms.max(axis=1)))
    floor = float(norms[best].max())
    bound = gadget.floor_bound
    holds = floor >= bound * (1.0 - 1e-12)
    logger.info(f"floor {floor:.6g} vs bound {bound:.6g} over {len(runs[0]) - 1} rounds")
    return FloorCheck(
        best_grad_norm_p1=float(norms[best, 0]), best_grad_norm_p2=float(norms[best, 1]),
        floor=floor, bound=bound, holds=holds,
    )


# ---------------------------------------------------------------------------
# Escape threshold
# ---------------------------------------------------------------------------

class ZeroAggregator:
    """Always returns the zero vector."""

    def __call__(self, inputs, honest_count=None) -> np.ndarray:
        return np.zeros(np.asarray(inputs).shape[1])


def lemma6_escape_threshold(L: float, eps: float, sigma_sq: float, n: int, delta: float, rho: float) -> int:
    """
    Smallest integer batch size m with m > sigma^2 (rho delta (n - 1) - 1) / (4 eps^2 n).

    Below it the zero aggregator satisfies the robustness bound in expectation
    and any method stays at x0 where ||grad f|| = 2 eps.
    """
    threshold = sigma_sq * (rho * delta * (n - 1) - 1.0) / (4.0 * eps ** 2 * n)
    if threshold < 0:
        return 1
    # eps**2 rounding can land an integral threshold just below itself
    return max(int(math.floor(threshold + 1e-9)) + 1, 1)


@dataclass
class EscapeEstimate:
    m: int
    lhs: float
    rhs: float

    @property
    def zero_admissible(self) -> bool:
        return self.lhs <= self.rhs


def lemma6_monte_carlo(
    eps: float,
    sigma_sq: float,
    n: int,
    rho_delta: float,
    m: int,
    draws: int = config.SUITE_TRIALS,
    seed: int = config.DEFAULT_SEED,
) -> EscapeEstimate:
    """
    Estimate E||0 - w_bar||^2 and (rho delta / n) E sum ||w_i - w_bar||^2 at x0 = 0.

    Node messages are batch-m averages of gradients 2 eps + noise of variance sigma^2.
    """
    rng = generator(seed, 0, m, 0x6)
    msgs = 2.0 * eps + math.sqrt(sigma_sq / m) * rng.standard_normal(size=(draws, n))
    center = msgs.mean(axis=1)
    lhs = float(np.mean(center ** 2))
    rhs = rho_delta / n * float(np.mean(np.sum((msgs - center[:, None]) ** 2, axis=1)))
    return EscapeEstimate(m=m, lhs=lhs, rhs=rhs)


def lemma6_stuck_run(
    L: float,
    eps: float,
    sigma_sq: float,
    n: int,
    m: int,
    T: int,
    eta: float = 0.1,
    seed: int = config.DEFAULT_SEED,
) -> List[np.ndarray]:
    """DSGD with the zero aggregator on the escape problem; returns the trajectory."""
    problem = lemma6_problem(L, eps, n)
    oracle = Oracle(OracleSpec(sigma_sq=sigma_sq, seed=seed), problem)
    cluster = Cluster(problem, oracle, ZeroAggregator(), seed=seed)
    return run_dsgd(cluster, np.zeros(1), eta, m, T).trajectory


# ---------------------------------------------------------------------------
# Chain function
# ---------------------------------------------------------------------------

def _live(a):
    a = np.asarray(a, dtype=np.float64)
    t = 2.0 * a - 1.0
    live = t > 0
    return live, np.where(live, t, 1.0)


def psi(a):
    """0 for a <= 1/2, exp(1 - 1/(2a - 1)^2) otherwise."""
    live, t = _live(a)
    out = np.where(live, np.exp(1.0 - 1.0 / t ** 2), 0.0)
    return out if out.ndim else float(out)


def psi_prime(a):
    live, t = _live(a)
    out = np.where(live, np.exp(1.0 - 1.0 / t ** 2) * 4.0 / t ** 3, 0.0)
    return out if out.ndim else float(out)


def phi(a):
    """sqrt(e) * integral_{-inf}^a exp(-t^2 / 2) dt."""
    a = np.asarray(a, dtype=np.float64)
    out = math.sqrt(math.e) * math.sqrt(math.pi / 2.0) * (1.0 + erf(a / math.sqrt(2.0)))
    return out if np.ndim(out) else float(out)


def phi_prime(a):
    a = np.asarray(a, dtype=np.float64)
    out = math.sqrt(math.e) * np.exp(-0.5 * a * a)
    return out if np.ndim(out) else float(out)


@dataclass
class ChainInstance:
    """Scaled chain f(x) = (L nu^2 / 152) h(x / nu) with Bernoulli discovery probability p."""

    d: int
    nu: float
    p: float
    L: float
    Delta: float
    eps: float
    sigma_sq: float
    d_formula: int = 0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"chain length must be at least 1, got {self.d}")
        if not 0 < self.p <= 1:
            raise ValueError(f"p must lie in (0, 1], got {self.p}")


def make_chain_instance(
    L: float,
    eps: float,
    sigma_sq: float,
    Delta: Optional[float] = None,
    d: Optional[int] = None,
) -> ChainInstance:
    """
    d = floor(L Delta / (7296 eps^2)) capped at the configured maximum unless given;
    nu = 2 * 152 eps / L; 1/p = sigma^2 / (2116 eps^2) + 1.
    """
    if Delta is None and d is None:
        raise ValueError("either Delta or d is required")
    if Delta is None:
        Delta = 7296.0 * eps ** 2 * d / L
    d_formula = int(math.floor(L * Delta / (7296.0 * eps ** 2)))
    if d is None:
        d = min(d_formula, config.CHAIN_MAX_DIM)
        if d < d_formula:
            logger.info(f"chain length {d_formula} capped at {d}")
    nu = 2.0 * config.CHAIN_SCALE * eps / L
    p = 1.0 / (sigma_sq / (2116.0 * eps ** 2) + 1.0)
    return ChainInstance(d=d, nu=nu, p=p, L=L, Delta=Delta, eps=eps, sigma_sq=sigma_sq, d_formula=d_formula)


def _h_value_and_grad(u: np.ndarray) -> Tuple[float, np.ndarray]:
    prev, cur = u[:-1], u[1:]
    value = -psi(1.0) * phi(u[0]) + float(np.sum(
        psi(-prev) * phi(-cur) - psi(prev) * phi(cur)
    ))
    grad = np.zeros_like(u)
    grad[0] = -psi(1.0) * phi_prime(u[0])
    # coordinate j gets a term from link (j-1, j) through Phi and from link (j, j+1) through Psi
    grad[1:] += -psi(-prev) * phi_prime(-cur) - psi(prev) * phi_prime(cur)
    grad[:-1] += -psi_prime(-prev) * phi(-cur) - psi_prime(prev) * phi(cur)
    return value, grad


def chain_value_and_gradient(inst: ChainInstance, x: np.ndarray) -> Tuple[float, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (inst.d,):
        raise ValueError(f"expected a vector of dimension {inst.d}, got shape {x.shape}")
    value, grad = _h_value_and_grad(x / inst.nu)
    scale = inst.L * inst.nu / config.CHAIN_SCALE
    return scale * inst.nu * value, scale * grad


def prog_half(inst: ChainInstance, x: np.ndarray) -> int:
    """Largest 1-based j with |x_j / nu| > 1/2; 0 when there is none."""
    live = np.flatnonzero(np.abs(np.asarray(x) / inst.nu) > 0.5)
    return int(live[-1]) + 1 if live.size else 0


def _bernoulli_rows(inst: ChainInstance, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
    _, grad = chain_value_and_gradient(inst, x)
    rows = np.tile(grad, (xi.shape[0], 1))
    frontier = prog_half(inst, x)
    rows[:, frontier:] *= (xi / inst.p)[:, None]
    return rows


def chain_stochastic_gradient(inst: ChainInstance, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Unbiased draw; coordinates beyond the progress index are scaled by xi / p, xi ~ Bernoulli(p)."""
    xi = (rng.random(1) < inst.p).astype(np.float64)
    return _bernoulli_rows(inst, x, xi)[0]


class ChainLoss(Loss):
    def __init__(self, inst: ChainInstance):
        self.inst = inst
        self.dimension = inst.d

    def value(self, x):
        return chain_value_and_gradient(self.inst, x)[0]

    def grad(self, x):
        return chain_value_and_gradient(self.inst, x)[1]

    def sample_grads(self, x, rng, m):
        xi = (rng.random(m) < self.inst.p).astype(np.float64)
        return _bernoulli_rows(self.inst, x, xi)


def chain_problem(inst: ChainInstance, honest: int, byzantine: int = 0) -> ProblemSpec:
    """Every honest node holds the same chain loss."""
    n = honest + byzantine
    return ProblemSpec(
        d=inst.d, n=n, delta=byzantine / n, honest_set=list(range(honest)),
        losses=[ChainLoss(inst) for _ in range(honest)], L=inst.L, mu=0.0, zeta_sq=0.0,
        name="chain",
    )


@dataclass
class FrontierZeroingAggregator:
    """
    Zeroes the highest nonzero coordinate of the honest mean whenever that
    deviation fits the robustness bound for this round; otherwise returns the mean.
    """

    rho_delta: float
    certificates: List[bool] = field(default_factory=list)

    def __call__(self, inputs, honest_count=None) -> np.ndarray:
        inputs = np.asarray(inputs, dtype=np.float64)
        h = inputs.shape[0] if honest_count is None else honest_count
        honest = inputs[:h]
        center = stable_mean(honest)
        live = np.flatnonzero(center != 0.0)
        if live.size == 0:
            return center
        j = live[-1]
        lhs = center[j] ** 2
        rhs = self.rho_delta / h * float(np.sum((honest - center) ** 2))
        ok = lhs <= rhs
        self.certificates.append(ok)
        if not ok:
            return center
        out = center.copy()
        out[j] = 0.0
        return out


def chain_cluster(
    inst: ChainInstance,
    honest: int,
    aggregator,
    seed: int = config.DEFAULT_SEED,
) -> Cluster:
    problem = chain_problem(inst, honest)
    oracle = Oracle(OracleSpec(sigma_sq=inst.sigma_sq, noise_kind=config.NOISE_CHAIN, seed=seed), problem)
    return Cluster(problem, oracle, aggregator, seed=seed)
