"""Gradient-flow dynamics and mode collapse for Gaussian-mixture VI."""

from .errors import (
    BracketingError,
    ConfigurationError,
    GmmflowError,
    IntegrationError,
    NumericalDomainError,
    NumericalError,
)
from .quadrature import (
    QuadratureRule,
    default_rule,
    expect_gaussian,
    gauss_hermite_rule,
    gaussian_stream,
    mc_expect,
)
from .reduced import (
    CollapseVerdict,
    FlowConfig,
    ProblemSpec,
    SummaryState,
    TrajectoryRecord,
    WeightClampWarning,
    det_p,
    f_aux,
    g_aux,
    g_root,
    integrate,
    integrate_batch,
    mean_flow_rhs,
    quasi_predictors,
    reduced_loss,
    reparam_weight_rhs,
    projected_weight_rhs,
    trajectory_to_csv,
    weight_grads,
)
from .fixed_points import (
    FixedPointReport,
    analytic_fixed_points,
    critical_radius_reduced,
    fd_jacobian,
    hessian_eigenvalues,
    numeric_fixed_point_search,
    reports_to_csv,
)
from .simulator import (
    GeneralTrajectoryRecord,
    GradEstimate,
    HighDimState,
    SimConfig,
    detect_collapse,
    gd_step,
    init_state,
    population_grad,
    population_loss,
    run_simulation,
    stochastic_grad,
    summarize,
    summarize_general,
    target_mean,
)

__version__ = "0.1.0"
