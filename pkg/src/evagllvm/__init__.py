"""Generalized linear latent variable models fitted by extended variational
approximation (EVA), with Laplace and standard-VA baselines."""
__version__ = "0.1.0"

from .families import FAMILY_NAMES, cdf, evaluate, get_family, tweedie_logW
from .inference import (cmsep, dunn_smyth_residuals, observed_information, ordination,
                        variance_explained, wald)
from .model import (ModelSpec, Parameters, ResponseData, VariationalParams, linear_predictor,
                    pack, residual_covariance, unpack)
from .objectives import (eva_gradient, eva_objective, laplace_gradient, laplace_objective,
                         oracle_marginal, va_gradient, va_objective)
from .optimizer import FitConfig, FitResult, fit, initialize
from .simulation import (StudyConfig, StudyReport, procrustes_error, run_study,
                         simulate_dataset, synthetic_truth)

__all__ = [
    "FAMILY_NAMES", "cdf", "evaluate", "get_family", "tweedie_logW",
    "cmsep", "dunn_smyth_residuals", "observed_information", "ordination",
    "variance_explained", "wald",
    "ModelSpec", "Parameters", "ResponseData", "VariationalParams", "linear_predictor",
    "pack", "residual_covariance", "unpack",
    "eva_gradient", "eva_objective", "laplace_gradient", "laplace_objective",
    "oracle_marginal", "va_gradient", "va_objective",
    "FitConfig", "FitResult", "fit", "initialize",
    "StudyConfig", "StudyReport", "procrustes_error", "run_study", "simulate_dataset",
    "synthetic_truth",
]
