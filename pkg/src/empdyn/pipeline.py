"""End-to-end estimation: moments, eigensystem, dynamics and PACE fits."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np

from .dataset import EvalGrid, SparseDataset, make_grid
from .dynamics import DynamicsEstimate, estimate_dynamics
from .eigenbasis import EigenSystem, TruncationRule, eigendecompose, eigenfunction_derivatives
from .errors import EstimationWarning
from .smoothing import KernelSpec, MomentEstimates, SmoothConfig, estimate_moments, select_bandwidths

logger = logging.getLogger(__name__)


@dataclass
class FitResult:
    grid: EvalGrid
    moments: MomentEstimates
    eig: EigenSystem
    warnings: List[str] = field(default_factory=list)


def _messages(caught) -> List[str]:
    out = []
    for w in caught:
        msg = str(w.message)
        if msg not in out:
            out.append(msg)
    return out


def fit(
    data: SparseDataset,
    grid: Optional[EvalGrid] = None,
    bandwidths: Union[SmoothConfig, str, None] = "auto",
    selector: TruncationRule = TruncationRule(),
    kernel: KernelSpec = KernelSpec(),
) -> FitResult:
    """Smooth the moments and decompose the covariance.

    ``bandwidths="auto"`` (or ``None``) runs cross-validation.  Estimation
    warnings are re-emitted and also returned in ``FitResult.warnings``.
    """
    grid = make_grid(data.domain) if grid is None else grid
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EstimationWarning)
        cfg = select_bandwidths(data, grid, kernel) if bandwidths in (None, "auto") else bandwidths
        moments = estimate_moments(data, grid, cfg)
        eig = eigendecompose(moments.G, grid, selector)
        eig = eig.with_derivatives(eigenfunction_derivatives(moments.dG, eig))
    msgs = _messages(w for w in caught if issubclass(w.category, EstimationWarning))
    for w in caught:
        warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
    return FitResult(grid, moments, eig, msgs)


def dynamics(
    eig: EigenSystem, selector: TruncationRule = TruncationRule(), floor_frac: float = 1e-6
) -> DynamicsEstimate:
    return estimate_dynamics(eig, selector, floor_frac)


def weighted_frobenius(A: np.ndarray, grid: EvalGrid) -> float:
    """``sqrt(int int A(t, s)**2 dt ds)`` with the grid's quadrature weights."""
    w = grid.quad_weights
    return float(np.sqrt(w @ (A * A) @ w))
