"""Two-stage estimation for structural equation models with non-linear latent effects.

A linear SEM (optionally with a Gaussian-mixture latent law) is fitted to
the predictor block, conditional expectations ``E[phi(xi) | X, Z]`` are
computed in closed form and used as covariates in a linear SEM for the
outcome block.  Standard errors account for the first-stage uncertainty
through composed influence functions.
"""

from .exceptions import (ConvergenceError, DataError, IdentificationError, NumericalError,
                         SemError, SpecError)
from .iv2sls import IV2SLS, IvFit, iv_fit, polynomial_iv
from .linsem import FitResult, LinearSEM, fit_ml, implied_moments, loglik, score
from .mixture import MixtureFit, MixtureSEM, fit_mixture
from .model import Fixed, Free, ParamVector, SemSpec
from .predict import (Custom, Exponential, Linear, NaturalSpline, PiecewiseLinear, Polynomial,
                      ProductInteraction, conditional_moments, make_basis, predict,
                      quadrature_oracle)
from .simgen import CATALOG, MonteCarloReport, Scenario, generate, get_scenario, run_mc
from .twostage import (CVReport, TwoStageFit, TwoStageSEM, predict_curve, sandwich_variance,
                       twostage_cv, twostage_fit)

__version__ = "0.1.0"

__all__ = [
    "SemError", "SpecError", "IdentificationError", "DataError", "NumericalError",
    "ConvergenceError",
    "SemSpec", "Fixed", "Free", "ParamVector",
    "fit_ml", "loglik", "score", "implied_moments", "FitResult", "LinearSEM",
    "fit_mixture", "MixtureFit", "MixtureSEM",
    "conditional_moments", "predict", "make_basis", "quadrature_oracle",
    "Linear", "Polynomial", "Exponential", "PiecewiseLinear", "NaturalSpline",
    "ProductInteraction", "Custom",
    "twostage_fit", "sandwich_variance", "predict_curve", "twostage_cv", "TwoStageFit",
    "TwoStageSEM", "CVReport",
    "iv_fit", "polynomial_iv", "IvFit", "IV2SLS",
    "Scenario", "CATALOG", "generate", "get_scenario", "run_mc", "MonteCarloReport",
]
