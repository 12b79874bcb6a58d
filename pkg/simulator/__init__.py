"""Byzantine-robust distributed optimization simulator."""

from .problems import (
    ProblemSpec,
    PartitionPlan,
    gradient,
    full_gradient,
    measure_heterogeneity,
    make_quadratic_problem,
    random_quadratic_problem,
    lemma1_problem,
    lemma6_problem,
    cosine_wells_problem,
    make_logistic_problem,
)
from .oracles import Oracle, QueryLedger, sample_gradient, minibatch_gradient
from .aggregators import (
    Aggregator,
    RobustnessDomainError,
    aggregate,
    build_aggregator,
    robustness_coefficient,
    robustness_lower_bound,
    check_robustness,
    select_clipping_threshold,
)
from .attacks import AttackContext, craft
from .optimizers import (
    Cluster,
    ScheduleError,
    init_byrd_nester,
    byrd_nester_round,
    run_dsgd,
    run_dsgdm,
    run_byrd_nester,
    run_byrd_renester,
    run_inexact_prox,
    strongly_convex_defaults,
    nonconvex_defaults,
    renester_schedule,
)
from .lowerbound_lab import (
    ConstructionError,
    make_lemma1_gadget,
    lemma1_floor_check,
    lemma6_escape_threshold,
    lemma6_monte_carlo,
    make_chain_instance,
    chain_value_and_gradient,
    chain_stochastic_gradient,
    prog_half,
)
from .harness import (
    partition_heterogeneous,
    build_problem,
    run_experiment,
    run_grid,
    summarize_grid,
    worst_case_max_accuracy,
    estimate_byzantine_floor,
    robustness_suite,
)

__all__ = [
    'ProblemSpec',
    'PartitionPlan',
    'gradient',
    'full_gradient',
    'measure_heterogeneity',
    'make_quadratic_problem',
    'random_quadratic_problem',
    'lemma1_problem',
    'lemma6_problem',
    'cosine_wells_problem',
    'make_logistic_problem',
    'Oracle',
    'QueryLedger',
    'sample_gradient',
    'minibatch_gradient',
    'Aggregator',
    'RobustnessDomainError',
    'aggregate',
    'build_aggregator',
    'robustness_coefficient',
    'robustness_lower_bound',
    'check_robustness',
    'select_clipping_threshold',
    'AttackContext',
    'craft',
    'Cluster',
    'ScheduleError',
    'init_byrd_nester',
    'byrd_nester_round',
    'run_dsgd',
    'run_dsgdm',
    'run_byrd_nester',
    'run_byrd_renester',
    'run_inexact_prox',
    'strongly_convex_defaults',
    'nonconvex_defaults',
    'renester_schedule',
    'ConstructionError',
    'make_lemma1_gadget',
    'lemma1_floor_check',
    'lemma6_escape_threshold',
    'lemma6_monte_carlo',
    'make_chain_instance',
    'chain_value_and_gradient',
    'chain_stochastic_gradient',
    'prog_half',
    'partition_heterogeneous',
    'build_problem',
    'run_experiment',
    'run_grid',
    'summarize_grid',
    'worst_case_max_accuracy',
    'estimate_byzantine_floor',
    'robustness_suite',
]
