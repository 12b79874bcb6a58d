"""Pydantic models for configuration, schedules and run records."""

import math
from typing import Optional, List, Dict, Any, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

import config

RuleName = Literal[
    "ideal", "mean", "krum", "median", "trimmed_mean", "faba",
    "geometric_median", "centered_clipping",
]
AttackName = Literal[
    "none", "gaussian", "sign_flip", "label_flip", "sample_duplicate",
    "zero_value", "isolation", "alie", "ipm", "bit_flip",
]
NoiseKind = Literal["gaussian_iid", "sample_subsampling", "bernoulli_chain"]
OptimizerName = Literal["dsgd", "dsgdm", "byrd_nester", "byrd_renester", "inexact_prox"]


class AggregatorConfig(BaseModel):
    """Robust aggregation rule plus the knobs it needs."""

    model_config = ConfigDict(extra="forbid")

    rule: RuleName = Field(description="Aggregation rule identifier")
    delta: float = Field(
        default=0.2, ge=0.0, lt=0.5,
        description="Estimated Byzantine fraction used for trimming budgets and rho*delta",
    )
    weiszfeld_tol: float = Field(
        default=config.WEISZFELD_TOL, gt=0.0,
        description="Geometric median: stop when the iterate moves less than this",
    )
    weiszfeld_max_iter: int = Field(
        default=config.WEISZFELD_MAX_ITER, ge=1,
        description="Geometric median: iteration cap",
    )
    clip_tau: Optional[float] = Field(
        default=None, ge=0.0,
        description="Centered clipping radius; None selects it from the inputs",
    )


class AttackConfig(BaseModel):
    """Byzantine attack strategy and its hyperparameters."""

    model_config = ConfigDict(extra="forbid")

    kind: AttackName = Field(default="none", description="Attack identifier")
    gaussian_std: float = Field(
        default=config.GAUSSIAN_ATTACK_STD, ge=0.0,
        description="Per-coordinate std of the gaussian attack",
    )
    sign_flip_scale: float = Field(
        default=config.SIGN_FLIP_SCALE, description="c in the -c * honest mean message"
    )
    ipm_epsilon: float = Field(
        default=config.IPM_EPSILON, description="Scale of the inner product manipulation"
    )
    alie_z: Optional[float] = Field(
        default=None, description="Override of the ALIE z quantile"
    )


class OracleSpec(BaseModel):
    """Stochastic gradient oracle description."""

    model_config = ConfigDict(extra="forbid")

    sigma_sq: float = Field(default=0.0, ge=0.0, description="Variance bound sigma^2")
    noise_kind: NoiseKind = Field(default="gaussian_iid", description="Noise model")
    seed: int = Field(default=config.DEFAULT_SEED, ge=0, description="Key of the counter-based generator")


class ByrdNesterParams(BaseModel):
    """Hyperparameters of one Byrd-Nester run."""

    eta: float = Field(gt=0.0, description="Step size")
    theta: float = Field(default=1.0, gt=0.0, le=1.0, description="Weight of fresh gradients")
    beta: float = Field(default=0.0, ge=0.0, lt=1.0, description="Extrapolation / estimator decay")
    alpha: float = Field(default=0.0, ge=0.0, le=1.0, description="Node-level vs server-level mix")
    m: int = Field(default=1, ge=1, description="Batch size per round")
    m0: int = Field(default=1, ge=0, description="Initial batch size; 0 starts estimators at zero")
    T: int = Field(default=1, ge=1, description="Number of rounds")
    q: Optional[float] = Field(default=None, ge=1.0, description="Acceleration constant behind beta")
    clamped: bool = Field(default=False, description="Whether a schedule cap was applied")
    notes: List[str] = Field(default_factory=list, description="Schedule diagnostics")

    @property
    def total_queries(self) -> int:
        return self.m0 + self.m * self.T


class RestartSchedule(BaseModel):
    """Per-call schedule of Byrd-reNester."""

    eps1_sq: float = Field(ge=0.0, description="Target squared error of the first call")
    T_list: List[int] = Field(description="Rounds of each call")
    m_list: List[int] = Field(description="Batch size of each call")
    P: int = Field(ge=1, description="Number of Byrd-Nester calls")

    @property
    def total_queries(self) -> int:
        return sum(m * T for m, T in zip(self.m_list, self.T_list))


class ProxParams(BaseModel):
    """Outer loop of the inexact proximal point method."""

    Gamma: int = Field(ge=1, description="Number of surrogate problems")
    prox_weight: float = Field(gt=0.0, description="Weight L of the proximal term")
    clamped: bool = Field(default=False, description="Gamma was clamped to the configured cap")


class RobustnessCheck(BaseModel):
    """Both sides of the robustness inequality for one aggregation."""

    lhs: float
    rhs: float
    holds: bool
    precondition_ok: Optional[bool] = Field(
        default=None, description="Centered clipping only: starting point close enough to the honest mean"
    )


class FloorCheck(BaseModel):
    """Result of running a method on the two indistinguishable problems."""

    best_grad_norm_p1: float
    best_grad_norm_p2: float
    floor: float
    bound: float
    holds: bool


class ProblemDescriptor(BaseModel):
    """Which objective to build and its constants."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal[
        "quadratic", "lemma1_first", "lemma1_second", "lemma6",
        "cosine_wells", "logistic_synthetic", "logistic_mnist",
    ] = Field(description="Problem family")
    dimension: int = Field(default=10, ge=1, description="Dimension of synthetic problems")
    L: float = Field(default=1.0, gt=0.0, description="Smoothness of synthetic problems")
    kappa: float = Field(default=10.0, ge=1.0, description="Condition number of quadratics")
    zeta: float = Field(default=0.0, ge=0.0, description="Heterogeneity of synthetic problems")
    delta: float = Field(default=0.25, gt=0.0, lt=0.5, description="delta used by the Lemma-1 construction")
    rho: float = Field(default=4.0, ge=0.0, description="rho used by the Lemma-1 construction")
    alpha_min: float = Field(default=1.0, gt=0.0, description="alpha_min of the Lemma-1 construction")
    eps: float = Field(default=0.05, gt=0.0, description="Gradient scale of the Lemma-6 instance")
    amplitude: float = Field(default=1.0, ge=0.0, description="cosine_wells amplitude A")
    frequency: float = Field(default=2.0, gt=0.0, description="cosine_wells frequency omega")
    l2: float = Field(default=config.DEFAULT_L2, ge=0.0, description="Logistic regularization weight")
    num_classes: int = Field(default=10, ge=2, description="Classes of synthetic classification data")
    train_size: int = Field(default=6000, ge=1, description="Training samples")
    test_size: int = Field(default=1000, ge=0, description="Held-out samples")
    mnist_dir: Optional[str] = Field(default=None, description="Directory holding the MNIST IDX files")
    x0_scale: float = Field(default=1.0, ge=0.0, description="Scale of the random start for synthetic problems")
    data_seed: Optional[int] = Field(
        default=None, ge=0,
        description="Seed for data, partition and start; defaults to the experiment seed",
    )


class OptimizerDescriptor(BaseModel):
    """Which method to run and how to parameterize it."""

    model_config = ConfigDict(extra="forbid")

    name: OptimizerName = Field(description="Method identifier")
    schedule: Literal["manual", "strongly_convex", "nonconvex"] = Field(
        default="manual", description="manual uses the fields below; others derive parameters"
    )
    eta: float = Field(default=config.STEP_SIZE, gt=0.0, description="Step size")
    batch_size: int = Field(default=config.BATCH_SIZE, ge=1, description="Batch size m")
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0, description="DSGDm momentum")
    beta: float = Field(default=config.MANUAL_BETA, ge=0.0, lt=1.0, description="Byrd-Nester beta")
    theta: float = Field(default=config.MANUAL_THETA, gt=0.0, le=1.0, description="Byrd-Nester theta")
    alpha: float = Field(default=config.MANUAL_ALPHA, ge=0.0, le=1.0, description="Byrd-Nester alpha")
    iterations: Optional[int] = Field(default=None, ge=1, description="Rounds; overrides epochs")
    epochs: int = Field(default=config.EPOCHS, ge=1, description="Passes over a node shard")
    eps: float = Field(default=0.1, gt=0.0, description="Target accuracy of derived schedules")
    R: Optional[float] = Field(default=None, gt=0.0, description="Estimate of ||x0 - x*||")
    Delta: Optional[float] = Field(default=None, gt=0.0, description="Estimate of f(x0) - f*")
    query_cap: int = Field(default=config.QUERY_CAP, ge=1, description="Cap on total oracle queries")


class ExperimentConfig(BaseModel):
    """One simulated run: problem, oracle, method, aggregator and attack."""

    model_config = ConfigDict(
        extra="forbid",
        populate_by_name=True,
        json_schema_extra={
            "example": {
                "schema": 1,
                "name": "logreg-median-alie",
                "problem": {"kind": "logistic_synthetic", "train_size": 6000, "test_size": 1000},
                "oracle": {"noise_kind": "sample_subsampling", "seed": 1},
                "optimizer": {"name": "byrd_nester", "eta": 0.1, "batch_size": 32, "epochs": 45},
                "aggregator": {"rule": "median", "delta": 0.2},
                "attack": {"kind": "alie"},
                "n": 10,
                "byzantine": 2,
            }
        },
    )

    schema_version: Literal[1] = Field(default=config.SCHEMA_VERSION, alias="schema", description="Config schema version")
    name: str = Field(default="run", description="Run label; names the output directory")
    problem: ProblemDescriptor
    oracle: OracleSpec = Field(default_factory=OracleSpec)
    optimizer: OptimizerDescriptor
    aggregator: AggregatorConfig
    attack: AttackConfig = Field(default_factory=AttackConfig)
    n: int = Field(default=config.NUM_NODES, ge=1, description="Total node count")
    byzantine: int = Field(default=config.NUM_BYZANTINE, ge=0, description="Byzantine node count")
    seed: int = Field(default=config.DEFAULT_SEED, ge=0, description="Seed for starts, partitions and attacks")
    tail_fraction: float = Field(default=config.TAIL_FRACTION, gt=0.0, le=1.0, description="Window of the floor estimate")
    out_dir: Optional[str] = Field(default=None, description="Where metrics are written")

    @model_validator(mode="after")
    def _honest_majority(self) -> "ExperimentConfig":
        if self.byzantine >= self.n - self.byzantine:
            raise ValueError(
                f"byzantine count {self.byzantine} must be below honest count {self.n - self.byzantine}"
            )
        return self


class GridConfig(BaseModel):
    """Cross product of methods, rules and attacks over a base experiment."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    schema_version: Literal[1] = Field(default=config.SCHEMA_VERSION, alias="schema")
    base: ExperimentConfig
    optimizers: List[OptimizerName] = Field(min_length=1)
    aggregators: List[RuleName] = Field(min_length=1)
    attacks: List[AttackName] = Field(min_length=1)
    seeds: List[int] = Field(default_factory=lambda: [config.DEFAULT_SEED])


class RunMetrics(BaseModel):
    """Per-round time series of one run."""

    rounds: List[int] = Field(default_factory=list)
    oracle_queries: List[int] = Field(default_factory=list)
    grad_norm: List[float] = Field(default_factory=list)
    f_gap: List[float] = Field(default_factory=list)
    agg_deviation: List[float] = Field(default_factory=list)
    accuracy: List[float] = Field(default_factory=list)
    wall_time: List[float] = Field(default_factory=list)
    epoch_accuracy: List[float] = Field(default_factory=list)
    floor_estimate: Optional[float] = None

    def record(
        self,
        round_index: int,
        queries: int,
        grad_norm: float,
        f_gap: float = math.nan,
        deviation: float = math.nan,
        accuracy: float = math.nan,
        wall_time: float = 0.0,
    ) -> None:
        if self.oracle_queries and queries < self.oracle_queries[-1]:
            raise ValueError("oracle query count must be non-decreasing")
        self.rounds.append(round_index)
        self.oracle_queries.append(queries)
        self.grad_norm.append(grad_norm)
        self.f_gap.append(f_gap)
        self.agg_deviation.append(deviation)
        self.accuracy.append(accuracy)
        self.wall_time.append(wall_time)

    def row(self, i: int) -> List[Any]:
        return [
            self.rounds[i], self.oracle_queries[i], self.grad_norm[i],
            self.f_gap[i], self.agg_deviation[i], self.accuracy[i],
        ]


class CellResult(BaseModel):
    """Terminal statistics of one grid cell."""

    name: str
    status: Literal["ok", "failed", "skipped"]
    error: Optional[str] = None
    optimizer: Optional[str] = None
    aggregator: Optional[str] = None
    attack: Optional[str] = None
    seed: Optional[int] = None
    grid_seed: Optional[int] = Field(default=None, description="Grid seed the cell replicates")
    total_queries: Optional[int] = None
    final_grad_norm: Optional[float] = None
    floor_estimate: Optional[float] = None
    max_accuracy: Optional[float] = None
    metadata: Dict[str, Any] = Field(default_factory=dict)
    config: Optional[Dict[str, Any]] = None


class GridSummary(BaseModel):
    """Grid outcome: every cell plus the worst case over attacks."""

    cells: List[CellResult]
    worst_case_max_accuracy: Dict[str, Dict[str, float]] = Field(
        default_factory=dict,
        description="optimizer -> rule -> min over attacks of the best test accuracy, averaged over grid seeds",
    )
    versus_dsgd: Dict[str, Dict[str, int]] = Field(
        default_factory=dict,
        description="optimizer -> cells where its max accuracy is at least DSGD's, and cells compared",
    )


class SuiteResult(BaseModel):
    """Empirical robustness of one rule over randomized trials."""

    rule: str
    trials: int
    holds: int
    rho_delta: float
    violations: Dict[str, int] = Field(default_factory=dict, description="Violations per attack")
    precondition_failures: int = Field(default=0, description="Centered clipping starts outside the assumed ball")
    worst_ratio: float = Field(default=0.0, description="Largest lhs / rhs observed")
    witness_trials: List[int] = Field(
        default_factory=list, description="Trials that violated the bound; each is reproducible from (seed, trial)",
    )

    @property
    def rate(self) -> float:
        return self.holds / self.trials if self.trials else math.nan
