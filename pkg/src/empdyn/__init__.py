"""Empirical first-order dynamics of sparsely observed random functions.

Estimates the dynamic equation ``X'(t) - mu'(t) = beta(t) (X(t) - mu(t)) + Z(t)``
from sparse, noisy longitudinal data by pooled local polynomial smoothing,
functional principal components, and conditional-expectation recovery of
individual trajectories.
"""

__version__ = "0.1.0"

from .dataset import EvalGrid, SparseDataset, SubjectRecord, load_csv, make_grid, write_csv  # noqa: E402
from .dynamics import DynamicsEstimate, estimate_dynamics, subdomain_report  # noqa: E402
from .eigenbasis import EigenSystem, TruncationRule, eigendecompose, eigenfunction_derivatives  # noqa: E402
from .errors import (  # noqa: E402
    ConfigError,
    DataError,
    DegenerateInputError,
    EmpdynError,
    EstimationError,
    EstimationWarning,
    SingularSystemError,
)
from .pace import SubjectFit, conditional_scores, drift_score_extremes, fit_subject  # noqa: E402
from .smoothing import KernelSpec, MomentEstimates, SmoothConfig, estimate_moments, select_bandwidths  # noqa: E402

__all__ = [
    "ConfigError",
    "DataError",
    "DegenerateInputError",
    "DynamicsEstimate",
    "EigenSystem",
    "EmpdynError",
    "EstimationError",
    "EstimationWarning",
    "EvalGrid",
    "KernelSpec",
    "MomentEstimates",
    "SingularSystemError",
    "SmoothConfig",
    "SparseDataset",
    "SubjectFit",
    "SubjectRecord",
    "TruncationRule",
    "conditional_scores",
    "drift_score_extremes",
    "eigendecompose",
    "eigenfunction_derivatives",
    "estimate_dynamics",
    "estimate_moments",
    "fit_subject",
    "load_csv",
    "make_grid",
    "select_bandwidths",
    "subdomain_report",
]
