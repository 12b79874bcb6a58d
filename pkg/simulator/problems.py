"""Distributed objectives: quadratic families, a non-convex toy and multi-class logistic regression."""

import math
from dataclasses import dataclass, field
from typing import Optional, List, Tuple, Sequence

import numpy as np
from loguru import logger

import config


class DimensionError(ValueError):
    """Vector length does not match the problem dimension."""


class NotHonestError(ValueError):
    """A Byzantine node index was passed where an honest node is required."""


class Loss:
    """One node's differentiable loss. Subclasses define value and grad."""

    dimension: int

    def value(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample_grads(self, x: np.ndarray, rng: np.random.Generator, m: int) -> np.ndarray:
        """Draw m stochastic gradients as rows of an (m, d) array."""
        raise NotImplementedError(f"{type(self).__name__} has no native sampling noise")

    def flipped(self) -> Optional["Loss"]:
        """Loss computed on poisoned labels, or None when the loss has no labels."""
        return None


class QuadraticLoss(Loss):
    """f(x) = 1/2 sum_j c_j x_j^2 - b^T x with diagonal curvature c."""

    def __init__(self, curvature, offset):
        self.offset = np.atleast_1d(np.asarray(offset, dtype=np.float64))
        self.dimension = self.offset.shape[0]
        self.curvature = np.broadcast_to(
            np.asarray(curvature, dtype=np.float64), (self.dimension,)
        ).copy()

    def value(self, x):
        return float(0.5 * np.dot(self.curvature * x, x) - np.dot(self.offset, x))

    def grad(self, x):
        return self.curvature * x - self.offset

    @property
    def minimizer(self) -> np.ndarray:
        return self.offset / self.curvature


class ShiftedLoss(Loss):
    """Adds a constant vector to another loss's gradient (a linear term in the value)."""

    def __init__(self, base: Loss, shift):
        self.base = base
        self.shift = np.atleast_1d(np.asarray(shift, dtype=np.float64))
        self.dimension = base.dimension

    def value(self, x):
        return self.base.value(x) + float(np.dot(self.shift, x))

    def grad(self, x):
        return self.base.grad(x) + self.shift

    def sample_grads(self, x, rng, m):
        return self.base.sample_grads(x, rng, m) + self.shift


class CosineWellsLoss(Loss):
    """f(x) = sum_j [x_j^2 / 2 + A cos(w x_j)] - b^T x; smooth with L = 1 + A w^2."""

    def __init__(self, amplitude: float, frequency: float, offset):
        self.amplitude = amplitude
        self.frequency = frequency
        self.offset = np.asarray(offset, dtype=np.float64)
        self.dimension = self.offset.shape[0]

    def value(self, x):
        return float(
            0.5 * np.dot(x, x)
            + self.amplitude * np.cos(self.frequency * x).sum()
            - np.dot(self.offset, x)
        )

    def grad(self, x):
        return x - self.amplitude * self.frequency * np.sin(self.frequency * x) - self.offset


class ProximalLoss(Loss):
    """f(z) + w ||z - center||^2, the surrogate of one proximal point step."""

    def __init__(self, base: Loss, center: np.ndarray, weight: float):
        self.base = base
        self.center = np.array(center, dtype=np.float64)
        self.weight = weight
        self.dimension = base.dimension

    def value(self, x):
        diff = x - self.center
        return self.base.value(x) + self.weight * float(np.dot(diff, diff))

    def grad(self, x):
        return self.base.grad(x) + 2.0 * self.weight * (x - self.center)

    def sample_grads(self, x, rng, m):
        return self.base.sample_grads(x, rng, m) + 2.0 * self.weight * (x - self.center)

    def flipped(self):
        base = self.base.flipped()
        return None if base is None else ProximalLoss(base, self.center, self.weight)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


class LogisticLoss(Loss):
    """Mean softmax cross-entropy over a shard plus (l2/2)||W||^2, W flattened row-major (features x classes)."""

    def __init__(self, features: np.ndarray, labels: np.ndarray, num_classes: int, l2: float):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.num_classes = num_classes
        self.l2 = l2
        self.num_samples, self.num_features = self.features.shape
        self.dimension = self.num_features * num_classes

    def _weights(self, x):
        return x.reshape(self.num_features, self.num_classes)

    def value(self, x):
        W = self._weights(x)
        logits = self.features @ W
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1))
        picked = shifted[np.arange(len(self.labels)), self.labels]
        return float(np.mean(log_norm - picked) + 0.5 * self.l2 * np.dot(x, x))

    def grad(self, x):
        W = self._weights(x)
        residual = _softmax(self.features @ W)
        residual[np.arange(len(self.labels)), self.labels] -= 1.0
        grad = self.features.T @ residual / len(self.labels)
        return grad.ravel() + self.l2 * x

    def sample_grads(self, x, rng, m):
        # with replacement
        idx = rng.integers(0, len(self.labels), size=m)
        feats = self.features[idx]
        residual = _softmax(feats @ self._weights(x))
        residual[np.arange(m), self.labels[idx]] -= 1.0
        per_sample = feats[:, :, None] * residual[:, None, :]
        return per_sample.reshape(m, -1) + self.l2 * x

    def flipped(self):
        return LogisticLoss(self.features, self.num_classes - 1 - self.labels, self.num_classes, self.l2)

    def predict(self, x, features: np.ndarray) -> np.ndarray:
        return np.argmax(features @ self._weights(x), axis=1)


@dataclass
class PartitionPlan:
    """Sample indices owned by each honest node."""

    shards: List[np.ndarray]

    @property
    def honest_count(self) -> int:
        return len(self.shards)


@dataclass
class ProblemSpec:
    """A distributed objective over n nodes; nodes 0..|H|-1 are honest, the rest Byzantine."""

    d: int
    n: int
    delta: float
    honest_set: List[int]
    losses: List[Loss]
    L: float
    mu: float
    zeta_sq: float
    x_star: Optional[np.ndarray] = None
    f_star: Optional[float] = None
    name: str = "problem"
    test_set: Optional[Tuple[np.ndarray, np.ndarray]] = None
    lower_bound: Optional[float] = None
    _poisoned: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        h = len(self.honest_set)
        if h <= self.n - h:
            raise ValueError(f"honest majority violated: {h} honest of {self.n}")
        if h + 1e-9 < (1.0 - self.delta) * self.n:
            raise ValueError(f"{h} honest nodes is below (1 - delta) * n = {(1 - self.delta) * self.n:g}")
        if self.mu > 0 and self.mu > self.L * (1 + 1e-12):
            raise ValueError(f"mu={self.mu} exceeds L={self.L}")
        if len(self.losses) != h:
            raise ValueError("one loss per honest node required")

    @property
    def honest_count(self) -> int:
        return len(self.honest_set)

    @property
    def num_byzantine(self) -> int:
        return self.n - self.honest_count

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1 or x.shape[0] != self.d:
            raise DimensionError(f"expected a vector of dimension {self.d}, got shape {x.shape}")
        return x

    def loss(self, node: int) -> Loss:
        if node not in self.honest_set:
            raise NotHonestError(f"node {node} is not honest; Byzantine nodes have no honest loss")
        return self.losses[node]

    def gradient(self, node: int, x: np.ndarray) -> np.ndarray:
        return self.loss(node).grad(self._check(x))

    def node_gradients(self, x: np.ndarray) -> np.ndarray:
        x = self._check(x)
        return np.stack([loss.grad(x) for loss in self.losses])

    def full_gradient(self, x: np.ndarray) -> np.ndarray:
        return self.node_gradients(x).mean(axis=0)

    def value(self, x: np.ndarray) -> float:
        x = self._check(x)
        return float(np.mean([loss.value(x) for loss in self.losses]))

    def gap(self, x: np.ndarray) -> float:
        """f(x) - f*, or NaN when the optimum is unknown."""
        if self.f_star is None:
            return math.nan
        return self.value(x) - self.f_star

    def measure_heterogeneity(self, xs: Sequence[np.ndarray]) -> float:
        if len(xs) == 0:
            raise ValueError("at least one sample point is required")
        worst = 0.0
        for x in xs:
            grads = self.node_gradients(x)
            dev = grads - grads.mean(axis=0)
            worst = max(worst, float(np.mean(np.sum(dev * dev, axis=1))))
        return worst

    def poisoned_loss(self, byzantine_index: int) -> Optional[Loss]:
        """Flipped-label copy of honest shard (k mod |H|) used by the label-flip attack."""
        source = byzantine_index % self.honest_count
        if source not in self._poisoned:
            self._poisoned[source] = self.losses[source].flipped()
        return self._poisoned[source]

    @property
    def has_labels(self) -> bool:
        """Whether the label-flip attack can poison this problem's losses."""
        return self.poisoned_loss(0) is not None

    def accuracy(self, x: np.ndarray) -> float:
        if self.test_set is None or not isinstance(self.losses[0], LogisticLoss):
            return math.nan
        features, labels = self.test_set
        preds = self.losses[0].predict(self._check(x), features)
        return float(np.mean(preds == labels))

    def with_losses(self, losses: List[Loss], L: float, mu: float, name: str) -> "ProblemSpec":
        """Same node layout with different losses; optimum and heterogeneity are not carried over."""
        return ProblemSpec(
            d=self.d, n=self.n, delta=self.delta, honest_set=list(self.honest_set),
            losses=losses, L=L, mu=mu, zeta_sq=math.nan, name=name,
        )


def gradient(problem: ProblemSpec, node: int, x: np.ndarray) -> np.ndarray:
    """Exact gradient of an honest node's loss."""
    return problem.gradient(node, x)


def full_gradient(problem: ProblemSpec, x: np.ndarray) -> np.ndarray:
    """Average gradient over honest nodes."""
    return problem.full_gradient(x)


def measure_heterogeneity(problem: ProblemSpec, xs: Sequence[np.ndarray]) -> float:
    """Max over xs of (1/|H|) sum_i ||grad f_i(x) - grad f(x)||^2."""
    return problem.measure_heterogeneity(xs)


def _honest_range(n: int, byzantine: int) -> List[int]:
    return list(range(n - byzantine))


def make_quadratic_problem(
    curvature: np.ndarray,
    offsets: np.ndarray,
    byzantine: int = 0,
    delta: Optional[float] = None,
    name: str = "quadratic",
) -> ProblemSpec:
    """
    Build a problem whose honest nodes share diagonal curvature and differ in offsets.

    Args:
        curvature: (d,) diagonal curvature, all entries positive
        offsets: (|H|, d) per-node linear offsets b_i
        byzantine: Number of Byzantine nodes appended after the honest ones
        delta: Estimated Byzantine fraction; defaults to the true fraction

    Returns:
        ProblemSpec with exact optimum and heterogeneity
    """
    offsets = np.atleast_2d(np.asarray(offsets, dtype=np.float64))
    h, d = offsets.shape
    curvature = np.broadcast_to(np.asarray(curvature, dtype=np.float64), (d,)).copy()
    n = h + byzantine
    losses = [QuadraticLoss(curvature, b) for b in offsets]
    b_bar = offsets.mean(axis=0)
    x_star = b_bar / curvature
    f_star = float(np.mean([loss.value(x_star) for loss in losses]))
    dev = offsets - b_bar
    zeta_sq = float(np.mean(np.sum(dev * dev, axis=1)))
    return ProblemSpec(
        d=d, n=n, delta=byzantine / n if delta is None else delta,
        honest_set=_honest_range(n, byzantine), losses=losses,
        L=float(curvature.max()), mu=float(curvature.min()), zeta_sq=zeta_sq,
        x_star=x_star, f_star=f_star, name=name,
    )


def random_quadratic_problem(
    d: int,
    L: float,
    mu: float,
    zeta: float,
    honest: int,
    byzantine: int = 0,
    seed: int = config.DEFAULT_SEED,
    center: bool = True,
) -> ProblemSpec:
    """
    Heterogeneous quadratics with curvature spread over [mu, L] and heterogeneity exactly zeta^2.

    Args:
        d: Dimension
        L: Largest curvature
        mu: Smallest curvature
        zeta: Root mean squared offset deviation across honest nodes
        honest: Honest node count
        byzantine: Byzantine node count
        seed: Seed for the offsets
        center: Put the global minimizer at the origin
    """
    rng = np.random.default_rng(seed)
    curvature = np.linspace(mu, L, d) if d > 1 else np.array([L])
    b_bar = np.zeros(d) if center else rng.normal(size=d)
    spread = rng.normal(size=(honest, d))
    spread -= spread.mean(axis=0)
    scale = math.sqrt(float(np.mean(np.sum(spread * spread, axis=1))))
    offsets = b_bar + (zeta * spread / scale if scale > 0 else 0.0 * spread)
    return make_quadratic_problem(curvature, offsets, byzantine=byzantine, name="random_quadratic")


def lemma1_problem(
    delta: float,
    zeta: float,
    n: int,
    second: bool = False,
    rho: float = 4.0,
    alpha_min: float = 1.0,
    byzantine: int = 0,
) -> ProblemSpec:
    """
    One-dimensional pair of problems that no robust method can tell apart.

    Among the n honest nodes, the first floor(delta * n) have gradient
    x - delta^{-1/2} zeta and the rest x. The second problem adds
    alpha_min * rho^{1/2} delta^{1/2} zeta to every node gradient.
    """
    shifted = int(math.floor(delta * n + 1e-9))
    offsets = np.zeros((n, 1))
    offsets[:shifted, 0] = zeta / math.sqrt(delta)
    first = make_quadratic_problem(1.0, offsets, byzantine=byzantine, delta=delta, name="lemma1_first")
    if not second:
        return first

    shift = alpha_min * math.sqrt(rho) * math.sqrt(delta) * zeta
    losses = [ShiftedLoss(loss, [shift]) for loss in first.losses]
    x_star = first.x_star - shift
    problem = first.with_losses(losses, L=1.0, mu=1.0, name="lemma1_second")
    problem.zeta_sq = first.zeta_sq
    problem.x_star = x_star
    problem.f_star = problem.value(x_star)
    return problem


def lemma6_problem(L: float, eps: float, n: int, byzantine: int = 0) -> ProblemSpec:
    """f_i(x) = L x^2 / 2 + 2 eps x for every node; grad f(0) = 2 eps."""
    offsets = np.full((n, 1), -2.0 * eps)
    return make_quadratic_problem(L, offsets, byzantine=byzantine, name="lemma6")


def cosine_wells_problem(
    d: int,
    amplitude: float,
    frequency: float,
    zeta: float,
    honest: int,
    byzantine: int = 0,
    seed: int = config.DEFAULT_SEED,
) -> ProblemSpec:
    """Non-convex smooth family; f >= -A d gives a lower bound for Delta estimates."""
    rng = np.random.default_rng(seed)
    spread = rng.normal(size=(honest, d))
    spread -= spread.mean(axis=0)
    scale = math.sqrt(float(np.mean(np.sum(spread * spread, axis=1))))
    offsets = zeta * spread / scale if scale > 0 else np.zeros((honest, d))
    losses = [CosineWellsLoss(amplitude, frequency, b) for b in offsets]
    n = honest + byzantine
    problem = ProblemSpec(
        d=d, n=n, delta=byzantine / n, honest_set=_honest_range(n, byzantine), losses=losses,
        L=1.0 + amplitude * frequency ** 2, mu=0.0, zeta_sq=zeta ** 2, name="cosine_wells",
    )
    problem.lower_bound = -amplitude * d - float(np.max(np.sum(offsets ** 2, axis=1))) / 2.0
    return problem


def logistic_smoothness(features: np.ndarray, l2: float) -> float:
    """0.5 * lambda_max(X^T X / N) + l2, an upper bound on the softmax cross-entropy Hessian."""
    gram = features.T @ features / features.shape[0]
    return config.LOGISTIC_HESSIAN_BOUND * float(np.linalg.eigvalsh(gram)[-1]) + l2


def make_logistic_problem(
    features: np.ndarray,
    labels: np.ndarray,
    n: int,
    l2: float,
    partition: PartitionPlan,
    num_classes: Optional[int] = None,
    test_set: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    sample_points: int = config.HETEROGENEITY_POINTS,
    seed: int = config.DEFAULT_SEED,
) -> ProblemSpec:
    """
    Multi-class logistic regression split over the honest nodes of a partition.

    Args:
        features: (N, p) sample matrix
        labels: (N,) integer labels in 0..C-1
        n: Total node count; n - partition.honest_count nodes are Byzantine
        l2: Weight of the (l2/2)||W||^2 term
        partition: Shards assigning every sample to exactly one honest node
        num_classes: C; inferred from labels when omitted
        test_set: Held-out (features, labels) for accuracy
        sample_points: Points used to estimate zeta^2
        seed: Seed of the sample points

    Returns:
        ProblemSpec with L from the spectral bound and mu = l2

    Raises:
        ValueError: On an empty shard, bad labels or negative l2
    """
    labels = np.asarray(labels, dtype=np.int64)
    if l2 < 0:
        raise ValueError("l2 must be nonnegative")
    C = int(labels.max()) + 1 if num_classes is None else num_classes
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels must lie in 0..{C - 1}")
    h = partition.honest_count
    if h > n:
        raise ValueError(f"partition has {h} shards but only {n} nodes")

    losses = []
    L = 0.0
    for node, shard in enumerate(partition.shards):
        if len(shard) == 0:
            raise ValueError(f"shard of node {node} is empty")
        X = features[shard]
        losses.append(LogisticLoss(X, labels[shard], C, l2))
        L = max(L, logistic_smoothness(X, l2))

    problem = ProblemSpec(
        d=features.shape[1] * C, n=n, delta=(n - h) / n, honest_set=list(range(h)),
        losses=losses, L=L, mu=l2, zeta_sq=0.0, name="logistic", test_set=test_set,
    )
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=problem.d) for _ in range(sample_points)]
    problem.zeta_sq = problem.measure_heterogeneity(xs) if sample_points > 0 else math.nan
    logger.debug(f"logistic problem: d={problem.d}, L={L:.4g}, zeta^2~{problem.zeta_sq:.4g}")
    return problem
