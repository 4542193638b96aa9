"""Plug-in estimates for the first-order dynamic equation.

Given a truncated eigensystem with eigenfunction derivatives, the centered
derivative decomposes pointwise as

    X'(t) - mu'(t) = beta(t) (X(t) - mu(t)) + Z(t),

with ``beta = cov(X', X) / var(X)`` and a drift process ``Z`` uncorrelated
with ``X(t)``.  Everything here is computed from the three diagonal sums

    varX  = sum_k lambda_k phi_k(t)**2
    varDX = sum_k lambda_k phi_k'(t)**2
    covXDX = sum_k lambda_k phi_k'(t) phi_k(t)

and, for the drift covariance, the corresponding full surfaces.

Variance floors: wherever ``varX`` falls below ``floor_frac * max(varX)`` it
is replaced by the floor, and the floored value is used consistently in
``beta``, ``V``, ``R2`` and on the diagonal of the last term of ``Gz``, so the
decomposition identities hold at every grid point.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .dataset import EvalGrid
from .eigenbasis import EigenSystem, TruncationRule, eigendecompose
from .errors import ConfigError, DegenerateInputError, EstimationError, EstimationWarning

logger = logging.getLogger(__name__)

FLOOR_FRAC = 1e-6
IDENTITY_TOL = 1e-10
PSD_RTOL = 1e-8


@dataclass(frozen=True)
class DynamicsEstimate:
    grid: EvalGrid
    beta: np.ndarray
    varX: np.ndarray
    varDX: np.ndarray
    covXDX: np.ndarray
    V: np.ndarray
    R2: np.ndarray
    Gz: np.ndarray
    drift_eig: Optional[EigenSystem] = None
    floor_counts: dict = field(default_factory=dict)


def _diagonal_sums(eig: EigenSystem):
    if eig.dphis is None:
        raise ValueError("eigensystem has no derivative functions")
    lam = eig.lambdas[:, None]
    varX = np.sum(lam * eig.phis**2, axis=0)
    varDX = np.sum(lam * eig.dphis**2, axis=0)
    cov = np.sum(lam * eig.dphis * eig.phis, axis=0)
    return varX, varDX, cov


def _floor(values: np.ndarray, floor_frac: float, what: str):
    top = float(np.max(values))
    if not top > 0:
        raise DegenerateInputError(f"{what} is identically zero")
    floor = floor_frac * top
    low = values < floor
    n = int(np.count_nonzero(low))
    if n:
        msg = f"{what} floored at {floor:.3g} on {n} grid points"
        logger.warning(msg)
        warnings.warn(msg, EstimationWarning, stacklevel=3)
    return np.where(low, floor, values), n


def floored_variance(eig: EigenSystem, floor_frac: float = FLOOR_FRAC) -> np.ndarray:
    """``var X(t)`` from the eigensystem, floored as used by every estimator here."""
    varX, _, _ = _diagonal_sums(eig)
    return _floor(varX, floor_frac, "var X")[0]


def compute_beta(eig: EigenSystem, floor_frac: float = FLOOR_FRAC) -> np.ndarray:
    """Varying coefficient ``beta(t) = covXDX(t) / varX(t)`` (floored denominator)."""
    varX, _, cov = _diagonal_sums(eig)
    varX_eff, _ = _floor(varX, floor_frac, "var X")
    return cov / varX_eff


def compute_drift_covariance(eig: EigenSystem, beta: np.ndarray, floor_frac: float = FLOOR_FRAC) -> np.ndarray:
    """Drift covariance surface ``Gz(t, s)`` from the four-term expansion."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (eig.grid.size,):
        raise ValueError("beta must be a grid function on the eigensystem grid")
    lam = eig.lambdas
    G11 = (eig.dphis.T * lam) @ eig.dphis
    G01 = (eig.phis.T * lam) @ eig.dphis  # [t, s] = sum lambda phi(t) phi'(s)
    G00 = (eig.phis.T * lam) @ eig.phis
    varX_eff = floored_variance(eig, floor_frac)
    G00[np.diag_indices_from(G00)] = varX_eff
    Gz = G11 - beta[:, None] * G01 - beta[None, :] * G01.T + np.outer(beta, beta) * G00
    return 0.5 * (Gz + Gz.T)


def compute_r2(eig: EigenSystem, floor_frac: float = FLOOR_FRAC) -> np.ndarray:
    """Pointwise squared correlation of ``X(t)`` and ``X'(t)``, clipped to [0, 1]."""
    varX, varDX, cov = _diagonal_sums(eig)
    varX_eff, _ = _floor(varX, floor_frac, "var X")
    varDX_eff, _ = _floor(varDX, floor_frac, "var X'")
    r2 = cov**2 / (varX_eff * varDX_eff)
    if np.any(r2 > 1 + 1e-12):
        logger.info("R2 clipped at %d points", int(np.sum(r2 > 1)))
    return np.clip(r2, 0.0, 1.0)


def drift_eigen(
    Gz: np.ndarray,
    grid: EvalGrid,
    selector: TruncationRule = TruncationRule(),
    scale: Optional[float] = None,
) -> EigenSystem:
    """Eigenpairs ``(rho_k, psi_k)`` of the drift covariance.

    ``scale`` sets the magnitude below which eigenvalues count as zero (the
    integrated derivative variance is a natural choice); it defaults to the
    integrated drift variance.  Raises :class:`DegenerateInputError` when the
    drift vanishes and :class:`EstimationError` when ``Gz`` is materially
    indefinite.
    """
    trace = float(grid.integrate(np.diag(Gz)))
    ref = trace if scale is None else float(scale)
    sw = np.sqrt(grid.quad_weights)
    lo = float(np.linalg.eigvalsh(sw[:, None] * Gz * sw[None, :])[0])
    if lo < -PSD_RTOL * max(ref, trace):
        raise EstimationError(f"drift covariance is indefinite: smallest eigenvalue {lo:.3g} (trace {trace:.3g})")
    return eigendecompose(Gz, grid, selector, scale=ref)


def estimate_dynamics(
    eig: EigenSystem,
    selector: TruncationRule = TruncationRule(),
    floor_frac: float = FLOOR_FRAC,
) -> DynamicsEstimate:
    """Assemble ``beta``, ``V``, ``R2``, ``Gz`` and the drift eigensystem."""
    varX, varDX, cov = _diagonal_sums(eig)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EstimationWarning)
        varX_eff, n_x = _floor(varX, floor_frac, "var X")
        _, n_dx = _floor(varDX, floor_frac, "var X'")
    for w in caught:
        warnings.warn(w.message, EstimationWarning, stacklevel=2)
    beta = cov / varX_eff
    V = np.maximum((varDX * varX_eff - cov**2) / varX_eff, 0.0)
    resid = varDX - (beta**2 * varX_eff + V)
    scale = max(1.0, float(np.max(np.abs(varDX))))
    if np.max(np.abs(resid)) > IDENTITY_TOL * scale:
        raise EstimationError(f"variance decomposition violated by {np.max(np.abs(resid)):.3g}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EstimationWarning)
        R2 = compute_r2(eig, floor_frac)
        Gz = compute_drift_covariance(eig, beta, floor_frac)
    if np.max(np.abs(np.diag(Gz) - V)) > IDENTITY_TOL * scale:
        raise EstimationError("drift covariance diagonal disagrees with the drift variance")

    drift = None
    try:
        drift = drift_eigen(Gz, eig.grid, selector, scale=float(eig.grid.integrate(varDX)))
    except DegenerateInputError:
        logger.info("drift covariance vanishes; no drift components")
    return DynamicsEstimate(
        eig.grid, beta, varX_eff, varDX, cov, V, R2, Gz, drift, {"varX": n_x, "varDX": n_dx}
    )


def subdomain_report(dyn: DynamicsEstimate, r2_threshold: float) -> List[dict]:
    """Maximal grid intervals where ``R2 >= r2_threshold``, labelled by the sign of beta.

    Labels: ``regression-to-mean`` (beta < 0 throughout), ``explosive``
    (beta > 0 throughout) or ``mixed``.
    """
    if not (0 < r2_threshold <= 1):
        raise ConfigError(f"R2 threshold must lie in (0, 1], got {r2_threshold}")
    above = dyn.R2 >= r2_threshold
    pts = dyn.grid.points
    out = []
    i, m = 0, pts.size
    while i < m:
        if not above[i]:
            i += 1
            continue
        j = i
        while j + 1 < m and above[j + 1]:
            j += 1
        b = dyn.beta[i : j + 1]
        if np.all(b < 0):
            label = "regression-to-mean"
        elif np.all(b > 0):
            label = "explosive"
        else:
            label = "mixed"
        out.append(
            {
                "start": float(pts[i]),
                "end": float(pts[j]),
                "first_index": i,
                "last_index": j,
                "label": label,
                "min_R2": float(np.min(dyn.R2[i : j + 1])),
            }
        )
        i = j + 1
    return out
