"""Sparse Bayesian factor regression with mean and variance batch effects, fitted by EM."""
from .em import FitResult, FitTrace, StoppingRule, e_step, fit, m_step
from .errors import BfrbeError, ConfigurationError, DataError, InternalError, NumericalError
from .initialization import InitKind, InitStrategy, init_least_squares, varimax
from .model import (
    LatentMoments,
    ModelState,
    ObservationSet,
    PriorFamily,
    PriorSpec,
    expected_log_posterior,
    log_posterior,
    residuals,
)
from .postprocess import SelectionMode, SparseSelection, left_order, standardize_factors, threshold_gamma
from .priors import default_scales, inclusion_probability, make_prior
from .selection import Candidate, CvPlan, FitReport, fit_report, select_best, weighted_cv_error
from .simulate import LoadingKind, MetricsRow, ScenarioSpec, evaluate, generate, make_loadings

__version__ = "0.1.0"
