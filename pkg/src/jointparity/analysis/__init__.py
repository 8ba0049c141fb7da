"""Post-processing of measured or simulated Wigner data."""

from .budget import BudgetConfig, ErrorBudget, error_budget, rms_contrast
from .chsh import ChshResult, chsh_maximize, chsh_value
from .estimation import (
    BootstrapResult,
    FitError,
    FitResult,
    ModelParams,
    bootstrap_fit,
    dominant_eigenstate,
    fit_density_model,
    forward_model,
    model_density,
    state_functionals,
)
from .fock_fit import FockFit, IllConditionedBasis, fit_fock_populations
from .formulas import analytic_parity_population, coherent_cross_wigner, ideal_ecs_wigner

__all__ = [
    "BudgetConfig", "ErrorBudget", "error_budget", "rms_contrast",
    "ChshResult", "chsh_maximize", "chsh_value",
    "BootstrapResult", "FitError", "FitResult", "ModelParams", "bootstrap_fit",
    "dominant_eigenstate", "fit_density_model", "forward_model", "model_density",
    "state_functionals",
    "FockFit", "IllConditionedBasis", "fit_fock_populations",
    "analytic_parity_population", "coherent_cross_wigner", "ideal_ecs_wigner",
]
