"""Greedy gradient Q-learning for dynamic treatment regimes.

The package fits linear greedy-action Q-functions to cohorts of finite
trajectories, provides a classical discretize-then-value-iterate baseline,
sandwich-type inference for the fitted weights, and a simulator of a
type-2-diabetes treatment cohort used throughout the tests and demos.
"""
from .mdp import (
    ABSORBING,
    ACTION_NONE,
    ConfigurationError,
    Dataset,
    DIABETES_SCHEMA,
    DomainError,
    EstimationError,
    GreedyPolicy,
    NumericalError,
    ParseError,
    Schema,
    State,
    Trajectory,
    Transition,
    greedy_action,
    make_state,
    state_action_value,
    td_error,
)
from .trajectory_io import read_dataset, write_dataset
from .features import (
    DIABETES_LAYOUT,
    FeatureMap,
    RbfBlock,
    RbfFeatureMap,
    RbfSpec,
    TabularFeatureMap,
    fit_rbf_spec,
    load_rbf_spec,
    save_rbf_spec,
)
from .compiled import CompiledDataset, compile_dataset
from .ggq import (
    EstimatorConfig,
    SCHEDULE_FAMILIES,
    ThetaEstimate,
    compute_D_hat,
    compute_W_hat,
    cross_moment,
    ggq_fit,
    load_estimate,
    objective_M_hat,
    save_estimate,
    subgradient_M,
    theta_candidates,
    validate_schedule,
)
from .classical import (
    A1C_EDGES,
    DiscretizerSpec,
    QTable,
    TabularPolicy,
    TransitionModel,
    estimate_transitions,
    load_qtable,
    policy_from_q,
    save_qtable,
    value_iteration,
)
from .inference import (
    InferenceResult,
    Interval,
    ci_q_contrast,
    ci_theta,
    estimate_gamma_matrix,
    estimate_sigma,
    infer,
    load_inference,
    save_inference,
)
from .diabetes import (
    SimParams,
    default_rollout_horizon,
    rollout_policy,
    simulate_cohort,
    simulate_cohort_arrays,
)
from .experiments import (
    STUDIES,
    StudySpec,
    fit_classical_policy,
    fit_ggq_policy,
    run_coverage_study,
    run_gamma_sensitivity,
    run_policy_comparison,
    run_study,
    run_tuning_sensitivity,
    run_value_comparison,
    true_policy,
)

__version__ = "0.1.0"

__all__ = [
    "ABSORBING", "ACTION_NONE", "A1C_EDGES", "CompiledDataset",
    "ConfigurationError", "DIABETES_LAYOUT", "DIABETES_SCHEMA", "Dataset",
    "DiscretizerSpec", "DomainError", "EstimationError", "EstimatorConfig",
    "FeatureMap", "GreedyPolicy", "InferenceResult", "Interval",
    "NumericalError", "ParseError", "QTable", "RbfBlock", "RbfFeatureMap",
    "RbfSpec", "SCHEDULE_FAMILIES", "STUDIES", "Schema", "SimParams",
    "State", "StudySpec", "TabularFeatureMap", "TabularPolicy",
    "ThetaEstimate", "Trajectory", "Transition", "TransitionModel",
    "ci_q_contrast", "ci_theta", "compile_dataset", "compute_D_hat",
    "compute_W_hat", "cross_moment", "default_rollout_horizon",
    "estimate_gamma_matrix", "estimate_sigma", "estimate_transitions",
    "fit_classical_policy", "fit_ggq_policy", "fit_rbf_spec", "ggq_fit",
    "greedy_action", "infer", "load_estimate", "load_inference",
    "load_qtable", "load_rbf_spec", "make_state", "objective_M_hat",
    "policy_from_q", "read_dataset", "rollout_policy", "run_coverage_study",
    "run_gamma_sensitivity", "run_policy_comparison", "run_study",
    "run_tuning_sensitivity", "run_value_comparison", "save_estimate",
    "save_inference", "save_qtable", "save_rbf_spec", "simulate_cohort",
    "simulate_cohort_arrays", "state_action_value", "subgradient_M",
    "td_error", "theta_candidates", "true_policy", "validate_schedule",
    "value_iteration",
]
