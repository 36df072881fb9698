"""Federated-learning wall-clock simulator and client-sampling optimizer.

Simulates synchronized federated training where each round samples clients
with replacement from a tunable distribution, aggregates with
inverse-probability weights, and pays a shared-bandwidth round time. On
top of the simulator sit a pilot-run estimator for the convergence-bound
ratio and an optimizer that picks the sampling distribution minimizing the
surrogate total convergence time.
"""

from .dataset import (
    FederatedDataset,
    FlatDataset,
    generate_synthetic,
    load_idx,
    partition_noniid,
)
from .estimation import EstimationReport, estimate_bound_ratio, rounds_to_reach, run_estimation
from .runtime import aggregate, run_training, sample_clients
from .sampling_opt import (
    OptInstance,
    OptimizerResult,
    check_monotonicity,
    closed_form_sampling,
    convergence_time_objective,
    min_variance_at_cost,
    optimize_sampling,
    predicted_rounds,
)
from .types import (
    ClientProfile,
    ConvergenceParams,
    FleetConfig,
    RoundTimeSolution,
    SamplingDistribution,
    TrainingConfig,
    TrainingTrace,
    validate_fleet,
)
from .wireless import (
    TimeParams,
    approx_expected_round_time,
    expected_max_comp_time,
    expected_min_comp_time,
    expected_round_time_bounds,
    solve_round_time,
)

__version__ = "0.1.0"

__all__ = [
    "ClientProfile",
    "ConvergenceParams",
    "EstimationReport",
    "FederatedDataset",
    "FlatDataset",
    "FleetConfig",
    "OptInstance",
    "OptimizerResult",
    "RoundTimeSolution",
    "SamplingDistribution",
    "TimeParams",
    "TrainingConfig",
    "TrainingTrace",
    "aggregate",
    "approx_expected_round_time",
    "check_monotonicity",
    "closed_form_sampling",
    "convergence_time_objective",
    "estimate_bound_ratio",
    "expected_max_comp_time",
    "expected_min_comp_time",
    "expected_round_time_bounds",
    "generate_synthetic",
    "load_idx",
    "min_variance_at_cost",
    "optimize_sampling",
    "partition_noniid",
    "predicted_rounds",
    "rounds_to_reach",
    "run_estimation",
    "run_training",
    "sample_clients",
    "solve_round_time",
    "validate_fleet",
]
