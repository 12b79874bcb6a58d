"""(delta_max, rho)-robust aggregation rules, their robustness coefficients and an empirical checker."""

import math
from typing import Optional, Callable, Dict

import numpy as np
from loguru import logger

import config
from schema import AggregatorConfig, RobustnessCheck


class RobustnessDomainError(ValueError):
    """delta outside the range a rule tolerates."""

    def __init__(self, rule: str, delta: float, delta_max: float):
        self.rule = rule
        self.delta = delta
        self.delta_max = delta_max
        super().__init__(f"{rule} tolerates delta < {delta_max:.4g}, got delta={delta:.4g}")


DELTA_MAX: Dict[str, float] = {
    "ideal": 0.5,
    "mean": 0.5,
    "krum": 0.5,
    "median": 0.5,
    "trimmed_mean": 0.5,
    "faba": 1.0 / 3.0,
    "geometric_median": 0.5,
    "centered_clipping": 0.5,
}


def robustness_coefficient(rule: str, delta: float, h: int) -> float:
    """
    rho * delta for a rule at an estimated Byzantine fraction.

    Args:
        rule: Aggregation rule name
        delta: Estimated Byzantine fraction
        h: Honest count |H| (FABA and centered clipping depend on it)

    Returns:
        The rho * delta product; 0 for the ideal and mean rules

    Raises:
        RobustnessDomainError: If delta is at or beyond the rule's delta_max
    """
    if rule not in DELTA_MAX:
        raise ValueError(f"Unknown aggregation rule: {rule}")
    if delta < 0 or delta >= DELTA_MAX[rule]:
        raise RobustnessDomainError(rule, delta, DELTA_MAX[rule])
    if rule in ("ideal", "mean"):
        return 0.0
    r = delta / (1.0 - 2.0 * delta)
    if rule == "krum":
        return 6.0 + 6.0 * r
    if rule in ("median", "geometric_median"):
        return 4.0 * (1.0 + r) ** 2
    if rule == "trimmed_mean":
        return 6.0 * r * (1.0 + r)
    if rule == "faba":
        return 2.0 * delta * h / (1.0 - 3.0 * delta)
    return 18.0 * math.sqrt(2.0) * delta * math.sqrt(h)


def robustness_lower_bound(delta: float) -> float:
    """Smallest rho * delta any robust rule can achieve."""
    if delta < 0 or delta >= 0.5:
        raise RobustnessDomainError("lower_bound", delta, 0.5)
    return delta / (1.0 - 2.0 * delta)


def byzantine_budget(delta: float, n: int) -> int:
    """b = ceil(delta * n)."""
    return int(math.ceil(delta * n - 1e-9))


def stable_mean(rows: np.ndarray) -> np.ndarray:
    """Row mean anchored at the first row; identical rows give that row bit-exactly."""
    anchor = rows[0]
    return anchor + (rows - anchor).mean(axis=0)


def _canonical(inputs: np.ndarray) -> np.ndarray:
    # lexicographic row order; makes ties and float sums independent of input order
    order = np.lexsort(inputs.T[::-1])
    return inputs[order]


def _validate(inputs) -> np.ndarray:
    arr = np.asarray(inputs, dtype=np.float64)
    if arr.ndim == 1:
        if arr.size == 0:
            raise ValueError("aggregate needs at least one input")
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"inputs must be n vectors of equal dimension, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("aggregate needs at least one input")
    return arr


def coordinate_median(inputs: np.ndarray) -> np.ndarray:
    return np.median(inputs, axis=0)


def trimmed_mean(inputs: np.ndarray, b: int) -> np.ndarray:
    n = inputs.shape[0]
    b = min(b, (n - 1) // 2)
    kept = np.sort(inputs, axis=0)[b:n - b]
    return stable_mean(kept)


def krum(inputs: np.ndarray, b: int) -> np.ndarray:
    n = inputs.shape[0]
    if n == 1:
        return inputs[0].copy()
    k = min(max(n - b - 2, 1), n - 1)
    sq = np.sum((inputs[:, None, :] - inputs[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(sq, np.inf)
    scores = np.sort(sq, axis=1)[:, :k].sum(axis=1)
    return inputs[int(np.argmin(scores))].copy()


def faba(inputs: np.ndarray, b: int) -> np.ndarray:
    kept = inputs
    for _ in range(min(b, inputs.shape[0] - 1)):
        center = stable_mean(kept)
        dist = np.sum((kept - center) ** 2, axis=1)
        kept = np.delete(kept, int(np.argmax(dist)), axis=0)
    return stable_mean(kept)


def _is_geometric_median(point: np.ndarray, inputs: np.ndarray) -> bool:
    diff = inputs - point
    dist = np.linalg.norm(diff, axis=1)
    same = dist == 0.0
    others = diff[~same] / dist[~same, None]
    return float(np.linalg.norm(others.sum(axis=0))) <= int(same.sum())


def geometric_median(
    inputs: np.ndarray,
    tol: float = config.WEISZFELD_TOL,
    max_iter: int = config.WEISZFELD_MAX_ITER,
) -> np.ndarray:
    """Weiszfeld iteration; snaps to an input point when that point is the exact minimizer."""
    z = coordinate_median(inputs)
    for _ in range(max_iter):
        dist = np.linalg.norm(inputs - z, axis=1)
        hit = np.flatnonzero(dist < config.WEISZFELD_SINGULARITY)
        if hit.size:
            z = inputs[hit[0]].copy()
            break
        weights = 1.0 / dist
        z_next = weights @ inputs / weights.sum()
        moved = float(np.linalg.norm(z_next - z))
        z = z_next
        if moved < tol:
            break

    # an input point can be the exact minimizer (e.g. a repeated majority value)
    for i in np.argsort(np.linalg.norm(inputs - z, axis=1)):
        if _is_geometric_median(inputs[i], inputs):
            return inputs[i].copy()
    return z


def centered_clipping_step(v: np.ndarray, inputs: np.ndarray, tau: float) -> np.ndarray:
    """(1/n) sum_i [v + (w_i - v) min(1, tau / ||w_i - v||)]."""
    if tau == 0.0:
        return np.array(v, dtype=np.float64, copy=True)
    diff = np.asarray(inputs, dtype=np.float64) - v
    norms = np.linalg.norm(diff, axis=1)
    scale = np.ones_like(norms)
    clip = norms > tau
    scale[clip] = tau / norms[clip]
    return v + (diff * scale[:, None]).mean(axis=0)


def honest_cohort(inputs: np.ndarray, v: np.ndarray, delta: float) -> np.ndarray:
    """The n - ceil(delta * n) inputs nearest v (stable order on ties)."""
    n = inputs.shape[0]
    keep = max(n - byzantine_budget(delta, n), 1)
    order = np.argsort(np.linalg.norm(inputs - v, axis=1), kind="stable")
    return inputs[order[:keep]]


def select_clipping_threshold(inputs: np.ndarray, v: np.ndarray, delta: float, h: Optional[int] = None) -> float:
    """
    Clipping radius tau from the estimated honest cohort H' and its mean.

    tau^2 = ((1 - delta) / delta) * sqrt(2 / |H'|) * sum_{i in H'} (||v - w'||^2 + ||w_i - w'||^2)

    Args:
        inputs: (n, d) received vectors
        v: Starting point
        delta: Estimated Byzantine fraction, > 0
        h: Cohort size override; defaults to n - ceil(delta * n)

    Returns:
        tau
    """
    if delta <= 0:
        raise ValueError("delta must be positive to select a clipping threshold")
    inputs = _validate(inputs)
    if h is None:
        cohort = honest_cohort(inputs, v, delta)
    else:
        order = np.argsort(np.linalg.norm(inputs - v, axis=1), kind="stable")
        cohort = inputs[order[:h]]
    center = stable_mean(cohort)
    spread = np.sum((cohort - center) ** 2) + cohort.shape[0] * float(np.sum((v - center) ** 2))
    tau_sq = (1.0 - delta) / delta * math.sqrt(2.0 / cohort.shape[0]) * spread
    return math.sqrt(tau_sq)


def clipping_precondition(v: np.ndarray, honest: np.ndarray) -> bool:
    """||v - w_bar||^2 <= (1/|H|) sum ||w_i - w_bar||^2."""
    center = stable_mean(honest)
    spread = float(np.mean(np.sum((honest - center) ** 2, axis=1)))
    return float(np.sum((v - center) ** 2)) <= spread


def centered_clipping(inputs: np.ndarray, delta: float, tau: Optional[float] = None) -> np.ndarray:
    v = coordinate_median(inputs)
    if tau is None:
        tau = select_clipping_threshold(inputs, v, delta) if delta > 0 else math.inf
    return centered_clipping_step(v, inputs, tau)


class Aggregator:
    """
    Callable rule: (inputs (n, d), honest_count) -> (d,).

    Honest messages are stacked first; only the ideal rule reads honest_count.
    """

    def __init__(self, cfg: AggregatorConfig):
        self.cfg = cfg
        self.rule = cfg.rule
        self.delta = cfg.delta

    def rho_delta(self, h: int) -> float:
        return robustness_coefficient(self.rule, self.delta, h)

    def __call__(self, inputs, honest_count: Optional[int] = None) -> np.ndarray:
        arr = _validate(inputs)
        n = arr.shape[0]
        if self.rule == "ideal":
            h = n if honest_count is None else honest_count
            return stable_mean(arr[:h])

        arr = _canonical(arr)
        b = byzantine_budget(self.delta, n)
        if self.rule == "mean":
            return stable_mean(arr)
        if self.rule == "median":
            return coordinate_median(arr)
        if self.rule == "trimmed_mean":
            return trimmed_mean(arr, b)
        if self.rule == "krum":
            return krum(arr, b)
        if self.rule == "faba":
            return faba(arr, b)
        if self.rule == "geometric_median":
            return geometric_median(arr, self.cfg.weiszfeld_tol, self.cfg.weiszfeld_max_iter)
        return centered_clipping(arr, self.delta, self.cfg.clip_tau)

    def __repr__(self):
        return f"Aggregator({self.rule}, delta={self.delta})"


def build_aggregator(cfg: AggregatorConfig, honest_count: Optional[int] = None) -> Aggregator:
    """Validate delta against the rule's tolerance and return the callable."""
    if honest_count is not None:
        robustness_coefficient(cfg.rule, cfg.delta, honest_count)
    return Aggregator(cfg)


def aggregate(cfg: AggregatorConfig, inputs, honest_count: Optional[int] = None) -> np.ndarray:
    """Aggregate n vectors with the configured rule."""
    return Aggregator(cfg)(inputs, honest_count)


def check_robustness(cfg: AggregatorConfig, honest, byzantine) -> RobustnessCheck:
    """
    Evaluate both sides of ||w - w_bar||^2 <= (rho delta / |H|) sum_{i in H} ||w_i - w_bar||^2.

    Args:
        cfg: Aggregator configuration
        honest: (|H|, d) honest inputs
        byzantine: (b, d) Byzantine inputs, possibly empty

    Returns:
        RobustnessCheck; precondition_ok is set for centered clipping
    """
    honest = _validate(honest)
    byzantine = np.asarray(byzantine, dtype=np.float64).reshape(-1, honest.shape[1])
    h = honest.shape[0]
    inputs = np.vstack([honest, byzantine])
    w = Aggregator(cfg)(inputs, h)
    center = stable_mean(honest)
    lhs = float(np.sum((w - center) ** 2))
    spread = float(np.sum((honest - center) ** 2))
    rhs = robustness_coefficient(cfg.rule, cfg.delta, h) / h * spread
    holds = lhs <= rhs * (1.0 + 1e-9)

    precondition = None
    if cfg.rule == "centered_clipping":
        precondition = clipping_precondition(coordinate_median(_canonical(inputs)), honest)

    if not holds:
        logger.debug(f"{cfg.rule}: robustness bound violated, lhs={lhs:.4g} rhs={rhs:.4g}")
    return RobustnessCheck(lhs=lhs, rhs=rhs, holds=holds, precondition_ok=precondition)


AggregatorFn = Callable[[np.ndarray, Optional[int]], np.ndarray]
