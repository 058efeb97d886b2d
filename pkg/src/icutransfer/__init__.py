"""Toolkit for nominal and robust proactive ICU-transfer policies.

Solves the single-patient ward MDP, builds factor-matrix and per-row
uncertainty sets from data, extracts worst-case transition kernels, and
evaluates transfer policies in a discrete-event hospital simulator.
"""

from icutransfer.estimation import (
    ConfidenceSpec,
    EstimationError,
    REFERENCE_ALPHA,
    TrajectorySet,
    confidence_radii,
    estimate_kernel,
    load_trajectories_csv,
    sample_kernels_in_ci,
    save_trajectories_csv,
    synth_trajectories,
)
from icutransfer.fleet import (
    FleetInstance,
    FleetSolution,
    LagrangianCurve,
    lagrangian_curve,
    lagrangian_value,
    m_sensitivity,
    penalized_single_values,
    save_sweep_csv,
    solve_fleet_exact,
    solve_fleet_penalized,
    whittle_sweep,
)
from icutransfer.mdp import (
    ConvergenceError,
    RewardSpec,
    TransferPolicy,
    TransitionKernel,
    bellman_apply,
    check_assumption_0,
    check_assumption_1,
    derive_composite_rewards,
    generate_instance,
    is_threshold,
    lemma1_bound_check,
    outside_option,
    policy_evaluation,
    value_iteration,
)
from icutransfer.nmf import (
    NmfProblem,
    NmfSolution,
    ResidualReport,
    bootstrap_factor_sets,
    build_u_emp,
    build_u_min,
    nmf_factorize,
    project_simplex,
    rank_sweep,
    residual_report,
)
from icutransfer.robust import (
    BoxSimplexSet,
    FactorModel,
    InfeasibleError,
    RectangularSet,
    RobustSolution,
    check_assumption_3,
    inner_min_box_simplex,
    robust_value_iteration,
    verify_max_principle,
    worst_case_kernel,
)
from icutransfer.simulator import (
    FractionModel,
    HospitalScenario,
    LosModel,
    SimEventLog,
    SimMetrics,
    WardOutcomes,
    analytic_ward_outcomes,
    calibrated_ward_kernel,
    default_scenario,
    run_simulation,
    save_metric_table,
    sensitivity_sweep,
    simulate_replication,
    threshold_sweep,
)

# cli builds on every module above; import it after them
from icutransfer.cli import (
    ScenarioDocument,
    SchemaError,
    demo_scenario_path,
)

__version__ = "0.1.0"

__all__ = [
    "BoxSimplexSet",
    "ConfidenceSpec",
    "ConvergenceError",
    "EstimationError",
    "FactorModel",
    "FleetInstance",
    "FleetSolution",
    "FractionModel",
    "HospitalScenario",
    "InfeasibleError",
    "LagrangianCurve",
    "LosModel",
    "NmfProblem",
    "NmfSolution",
    "REFERENCE_ALPHA",
    "RectangularSet",
    "ResidualReport",
    "RewardSpec",
    "RobustSolution",
    "ScenarioDocument",
    "SchemaError",
    "SimEventLog",
    "SimMetrics",
    "TrajectorySet",
    "TransferPolicy",
    "TransitionKernel",
    "WardOutcomes",
    "analytic_ward_outcomes",
    "bellman_apply",
    "bootstrap_factor_sets",
    "build_u_emp",
    "build_u_min",
    "calibrated_ward_kernel",
    "check_assumption_0",
    "check_assumption_1",
    "check_assumption_3",
    "confidence_radii",
    "default_scenario",
    "demo_scenario_path",
    "derive_composite_rewards",
    "estimate_kernel",
    "generate_instance",
    "inner_min_box_simplex",
    "is_threshold",
    "lagrangian_curve",
    "lagrangian_value",
    "lemma1_bound_check",
    "load_trajectories_csv",
    "m_sensitivity",
    "nmf_factorize",
    "outside_option",
    "penalized_single_values",
    "policy_evaluation",
    "project_simplex",
    "rank_sweep",
    "residual_report",
    "robust_value_iteration",
    "run_simulation",
    "sample_kernels_in_ci",
    "save_metric_table",
    "save_sweep_csv",
    "save_trajectories_csv",
    "sensitivity_sweep",
    "simulate_replication",
    "solve_fleet_exact",
    "solve_fleet_penalized",
    "synth_trajectories",
    "threshold_sweep",
    "value_iteration",
    "verify_max_principle",
    "whittle_sweep",
    "worst_case_kernel",
]
