"""Feedback control of partially observed diffusions.

Particle-filter state estimation from incremental nonlinear observations,
fused with adjoint-based stochastic gradient descent over the control
schedule, plus linear-quadratic and planar-vehicle benchmarks and the
convergence-study harness.
"""

from .model import (
    ControlSchedule,
    DegenerateUpdateError,
    ModelSpec,
    NumericOverflowError,
    ObservationRecord,
    StatePath,
    TimeGrid,
    euler_step,
    evaluate_cost,
    generate_observations,
    make_rng,
    simulate_forward,
)
from .fbsde import AdjointPath, gradient_integrand, solve_adjoint_batch, solve_adjoint_pathwise
from .particle_filter import (
    ParticleCloud,
    default_test_dictionary,
    effective_sample_size,
    empirical_measure_error,
    log_likelihoods,
    predict,
    resample,
    update_weights,
)
from .sgd import (
    SgdConfig,
    StepSchedule,
    full_gradient_oracle,
    optimize_at_time,
    sgd_gradient_sample,
    sgd_update,
)
from .driver import ReplayTruth, RunResult, SimulatedTruth, run_pf_sgd
from .experiments import (
    MomentAuditReport,
    StudyConfig,
    StudyResult,
    TrialRow,
    convergence_vs_iterations,
    convergence_vs_particles,
    export_csv,
    fixed_control_cost,
    make_benchmark,
    moment_bound_audit,
    run_study,
    run_trial,
    trial_seed,
)

__all__ = [
    "AdjointPath",
    "ControlSchedule",
    "DegenerateUpdateError",
    "ModelSpec",
    "MomentAuditReport",
    "NumericOverflowError",
    "ObservationRecord",
    "ParticleCloud",
    "ReplayTruth",
    "RunResult",
    "SgdConfig",
    "SimulatedTruth",
    "StatePath",
    "StepSchedule",
    "StudyConfig",
    "StudyResult",
    "TimeGrid",
    "TrialRow",
    "convergence_vs_iterations",
    "convergence_vs_particles",
    "default_test_dictionary",
    "effective_sample_size",
    "empirical_measure_error",
    "euler_step",
    "evaluate_cost",
    "export_csv",
    "fixed_control_cost",
    "full_gradient_oracle",
    "generate_observations",
    "gradient_integrand",
    "log_likelihoods",
    "make_benchmark",
    "make_rng",
    "moment_bound_audit",
    "optimize_at_time",
    "predict",
    "resample",
    "run_pf_sgd",
    "run_study",
    "run_trial",
    "trial_seed",
    "sgd_gradient_sample",
    "sgd_update",
    "simulate_forward",
    "solve_adjoint_batch",
    "solve_adjoint_pathwise",
    "update_weights",
]
