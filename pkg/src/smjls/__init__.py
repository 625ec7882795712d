"""Decay rates and convex dosing design for positive semi-Markov jump linear systems."""

from .bethedging import (
    Antibiotic,
    BetHedgingParams,
    SweepPoint,
    SweepResult,
    build_system,
    dosing_problem,
    optimize_dosing,
    suppression,
    sweep_dose_response,
    sweep_sojourn_shape,
    transformed_budget,
    truncation_mass,
    weibull_scale_for_mean,
    weibull_shape_for_mean,
    write_sweep_csv,
)
from .config import ConfigError, LoadedConfig, load_config
from .numlin import (
    NumericalError,
    PerronResult,
    gauss_legendre,
    integrate_matrix,
    matrix_exp,
    matrix_exp_stack,
    spectral_radius,
)
from .montecarlo import (
    DecayEstimate,
    TrajectorySample,
    estimate_decay,
    sample_sojourn,
    simulate,
    write_mean_norms_csv,
    write_switch_log_csv,
)
from .optimizer import (
    BudgetProblem,
    CertificateReport,
    OptimizationResult,
    PerformanceProblem,
    PhaseOneResult,
    SolverOptions,
    box_bounds,
    certify_budget,
    certify_performance,
    phase_one,
    solve_budget,
    solve_performance,
)
from .posy import ZERO, Monomial, Posynomial, PosyOrZero, Zero, add, mul, scale
from .system import (
    DecayRateReport,
    DiracSojourn,
    KernelBuilder,
    KernelMatrix,
    ParametrizedSystem,
    SemiMarkovSpec,
    SojournDistribution,
    TruncatedExponential,
    TruncatedWeibull,
    UniformSojourn,
    assemble_kernel,
    decay_rate,
    is_mean_stable,
    log_rho,
    log_rho_grad,
)

__version__ = "0.1.0"
