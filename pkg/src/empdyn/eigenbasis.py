"""Eigen-decomposition of smoothed covariance surfaces on a quadrature grid.

The integral operator ``(G f)(t) = int G(t, s) f(s) ds`` is discretized with
the grid's trapezoid weights ``w``.  Symmetrizing with ``D = diag(w)`` gives the
ordinary symmetric problem ``D^1/2 G D^1/2 u = lambda u`` whose eigenvectors map
back to quadrature-orthonormal grid functions ``phi = D^-1/2 u``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .dataset import EvalGrid
from .errors import ConfigError, DegenerateInputError, EstimationError, EstimationWarning

logger = logging.getLogger(__name__)

POSITIVE_RTOL = 1e-12
TIE_RTOL = 1e-10
SIGN_TIE_RTOL = 1e-9


@dataclass(frozen=True)
class TruncationRule:
    """Keep the fewest components whose cumulative FVE reaches ``fve``, at most ``k_max``."""

    fve: float = 0.95
    k_max: int = 20

    def __post_init__(self):
        if not (0 < self.fve <= 1):
            raise ConfigError(f"FVE threshold must lie in (0, 1], got {self.fve}")
        if int(self.k_max) != self.k_max or self.k_max < 1:
            raise ConfigError(f"k_max must be a positive integer, got {self.k_max}")


@dataclass(frozen=True)
class EigenSystem:
    """Leading ``K`` eigenpairs; rows of ``phis``/``dphis`` are grid functions."""

    grid: EvalGrid
    lambdas: np.ndarray
    phis: np.ndarray
    fve: np.ndarray
    dphis: Optional[np.ndarray] = None
    all_lambdas: Optional[np.ndarray] = None

    @property
    def K(self) -> int:
        return int(self.lambdas.size)

    def with_derivatives(self, dphis: np.ndarray) -> "EigenSystem":
        dphis = np.asarray(dphis, dtype=float)
        if dphis.shape != self.phis.shape:
            raise ValueError(f"dphis shape {dphis.shape} does not match phis {self.phis.shape}")
        return replace(self, dphis=dphis)

    def covariance(self) -> np.ndarray:
        """Truncated reconstruction ``sum_k lambda_k phi_k(t) phi_k(s)``."""
        out = (self.phis.T * self.lambdas) @ self.phis
        return 0.5 * (out + out.T)

    def gram(self) -> np.ndarray:
        """Quadrature Gram matrix of the eigenfunctions (identity up to rounding)."""
        return (self.phis * self.grid.quad_weights) @ self.phis.T

    def spacings(self) -> np.ndarray:
        """Eigengaps ``delta_k`` over the retained components (diagnostic only)."""
        lam = self.all_lambdas if self.all_lambdas is not None else self.lambdas
        lam = np.append(lam, 0.0) if lam.size == self.K else lam
        gaps = -np.diff(lam)
        out = np.empty(self.K)
        for k in range(self.K):
            lo = max(k - 1, 0)
            out[k] = gaps[0] if k == 0 else np.min(gaps[lo : k + 1])
        return out


def _apply_sign_convention(vecs: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude entry is positive.

    Entries within a relative ``SIGN_TIE_RTOL`` of the largest magnitude count
    as tied and the first of them decides, so rounding noise cannot pick
    between symmetric extremes.
    """
    mag = np.abs(vecs)
    tied = mag >= (1.0 - SIGN_TIE_RTOL) * mag.max(axis=1, keepdims=True)
    idx = np.argmax(tied, axis=1)
    signs = np.where(vecs[np.arange(vecs.shape[0]), idx] < 0, -1.0, 1.0)
    return vecs * signs[:, None]


def eigendecompose(
    G_hat: np.ndarray,
    grid: EvalGrid,
    selector: TruncationRule = TruncationRule(),
    scale: Optional[float] = None,
) -> EigenSystem:
    """Leading eigenpairs of a symmetric covariance surface on ``grid``.

    Eigenvalues at or below ``1e-12 * scale`` count as nonpositive and are
    discarded; ``scale`` defaults to the largest absolute eigenvalue of the
    input.  Raises :class:`DegenerateInputError` when none remain.
    """
    G = np.asarray(G_hat, dtype=float)
    m = grid.size
    if G.shape != (m, m):
        raise ValueError(f"surface shape {G.shape} does not match grid size {m}")
    if not np.all(np.isfinite(G)):
        raise EstimationError("covariance surface has non-finite entries")
    if np.max(np.abs(G - G.T), initial=0.0) > 1e-8 * max(1.0, np.max(np.abs(G))):
        raise ValueError("covariance surface is not symmetric")
    w = grid.quad_weights
    if np.any(w <= 0):
        raise ValueError("eigen-decomposition needs strictly positive quadrature weights")
    sw = np.sqrt(w)
    B = sw[:, None] * G * sw[None, :]
    B = 0.5 * (B + B.T)
    try:
        evals, evecs = np.linalg.eigh(B)
    except np.linalg.LinAlgError as exc:
        raise EstimationError(f"symmetric eigensolver failed: {exc}") from exc
    evals, evecs = evals[::-1], evecs[:, ::-1]

    ref = float(np.max(np.abs(evals))) if scale is None else float(scale)
    n_pos = int(np.sum(evals > POSITIVE_RTOL * ref)) if ref > 0 else 0
    if n_pos == 0:
        raise DegenerateInputError("covariance surface has no positive eigenvalues")
    pos = evals[:n_pos]
    cum = np.cumsum(pos) / np.sum(pos)
    k = int(np.searchsorted(cum, selector.fve - 1e-12)) + 1
    k = min(k, selector.k_max, n_pos)

    gaps = -np.diff(pos[: min(k + 1, n_pos)])
    if gaps.size and np.min(gaps) < TIE_RTOL * pos[0]:
        msg = f"near-tied eigenvalues among the leading {k} components (min gap {np.min(gaps):.3g})"
        logger.warning(msg)
        warnings.warn(msg, EstimationWarning, stacklevel=2)

    phis = _apply_sign_convention(evecs[:, :k].T / sw[None, :])
    return EigenSystem(grid, pos[:k].copy(), phis, cum[:k].copy(), None, pos.copy())


def eigenfunction_derivatives(dG: np.ndarray, eig: EigenSystem, grid: Optional[EvalGrid] = None) -> np.ndarray:
    """Eigenfunction derivatives ``(1/lambda_k) int dG(t, s) phi_k(s) ds``.

    ``dG`` is the partial derivative of the covariance in its first argument
    (rows index ``t``).  Returns a ``(K, M)`` array.
    """
    grid = eig.grid if grid is None else grid
    dG = np.asarray(dG, dtype=float)
    if dG.shape != (grid.size, grid.size):
        raise ValueError(f"dG shape {dG.shape} does not match grid size {grid.size}")
    if np.any(eig.lambdas <= 0):
        raise ValueError("eigenvalues must be positive")
    proj = (dG * grid.quad_weights[None, :]) @ eig.phis.T
    return (proj / eig.lambdas[None, :]).T


def derivative_covariance(eig: EigenSystem) -> np.ndarray:
    """Plug-in ``G^(1,1) = sum_k lambda_k phi_k'(s) phi_k'(t)``, exactly symmetric."""
    if eig.dphis is None:
        raise ValueError("eigensystem has no derivative functions")
    out = (eig.dphis.T * eig.lambdas) @ eig.dphis
    return 0.5 * (out + out.T)


def kl_of_derivative(
    G11: np.ndarray, grid: EvalGrid, selector: TruncationRule = TruncationRule()
) -> EigenSystem:
    """Karhunen-Loeve eigenpairs of the derivative process from its covariance."""
    return eigendecompose(G11, grid, selector)
