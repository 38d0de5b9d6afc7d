"""ATT estimation with penalized covariate-balancing weights and an immunization step."""

from .balancing import (
    EXP_LINK,
    LinkSpec,
    OverflowGuardError,
    balancing_loss,
    control_weights,
    fit_balancing_lowdim,
    fit_balancing_penalized,
    get_link,
    iterate_beta_loadings,
    lambda_level,
)
from .data_model import (
    DataError,
    Dataset,
    ExpansionSpec,
    add_intercept,
    expand_covariates,
    load_csv,
    write_csv,
)
from .estimators import (
    ESTIMATORS,
    AttEstimate,
    EstimationError,
    Tuning,
    att_double_selection,
    att_farrell,
    att_immunized,
    att_lowdim,
    att_naive,
    att_ols,
    correction_term,
    counterfactual_series,
    estimate,
    estimate_immunized,
    estimate_naive,
)
from .immunization import (
    SingularDesignError,
    fit_mu_lowdim,
    fit_mu_penalized,
    iterate_mu_loadings,
    weighted_ls_loss,
)
from .simulation import DgpSpec, SimulationReport, calibrate, draw_sample, run_study, true_att
from .solver import FitResult, PenaltyPlan, SolverError, kkt_residual, minimize_composite

__version__ = "0.1.0"
