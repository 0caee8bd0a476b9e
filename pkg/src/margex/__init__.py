"""Marginal logistic regression for clustered binary outcomes under an exponential-frailty joint model."""

from .dataset import Dataset
from .errors import (
    ArgumentError,
    BoundaryError,
    ConvergenceError,
    DomainError,
    MargexError,
    NumericalError,
    ParseError,
    ResourceError,
    SeparationError,
    StructureError,
    StudyError,
    UnreliableVarianceWarning,
)
from .estimation import FitMode, FitResult, SolverConfig, composite_loglik, composite_score_rho, fit, gee_score, solve_beta, solve_rho
from .frailty import DGPConfig, DGPKind, draw_frailties, gaussian_scale_matrix, preset_scenario, simulate_dataset
from .kernels import BACKEND
from .mc import MCSummary, StudySpec, run_study, summarize
from .mle import MLEResult, fit_composite_ml, fit_mle, full_loglik
from .model import (
    ClusterData,
    CorrelationKind,
    CorrelationStructure,
    Observation,
    Theta,
    covariance_matrix,
    inverse_logit,
    joint_prob_all_ones,
    marginal_prob,
    pairwise_prob,
    pattern_prob,
)
from .variance import CovarianceReport, joint_sandwich, model_based_cov, robust_cov, wald_ci

__version__ = "0.1.0"
