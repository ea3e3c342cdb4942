"""Calibration weighting with exact fixed-effect and relaxed random-effect constraints."""

__version__ = "0.1.0"

from .calibrate import (
    SoftTargets,
    SolveResult,
    SolverOptions,
    build_soft_targets,
    dual_gradient,
    dual_hessian,
    dual_objective,
    hard_targets,
    solve_newton,
)
from .cluster import (
    CausalFrame,
    ClusterDesign,
    build_cluster_targets,
    causal_ate,
    cluster_estimate,
    cluster_pseudo_values,
    cluster_variance,
)
from .core import (
    DomainError,
    InfeasibleStepError,
    InvalidFrameError,
    MixedEffectsSpec,
    PopulationFrame,
    SingularGramError,
    SoftCalError,
    ValidationReport,
    mask_unselected,
    restrict_frame,
    sample_view,
    validate_frame,
)
from .estimate import (
    BlupFit,
    EstimateReport,
    bias_corrected,
    blup_estimate,
    blup_predictions,
    blup_solve,
    estimate_report,
    influence_values,
    l2_penalized_solve,
    variance_estimates,
    weighted_mean,
)
from .loss import (
    LossSpec,
    conjugate_grad,
    conjugate_hess,
    conjugate_value,
    in_conjugate_domain,
    loss_value,
    weight_map,
    weight_map_deriv,
)
from .sim import (
    MetricsTable,
    Population,
    ScenarioConfig,
    gen_population,
    gen_selection,
    run_monte_carlo,
    two_stage_sample,
)
from .tune import (
    RemlSeed,
    TuneError,
    TuneResult,
    crossfit_mse,
    reml_gamma_seed,
    select_gamma,
)
