"""Conditional-expectation (PACE) recovery of individual trajectories.

Under a Gaussian model the best predictor of subject ``i``'s scores is

    xi_hat = Lambda Phi_i^T Sigma_i^{-1} (Y_i - mu_i),
    Sigma_i = Phi_i Lambda Phi_i^T + sigma2 I,

where ``Phi_i`` holds the eigenfunctions at the subject's observation times.
The push-through identity rewrites this as the K x K system

    (Phi_i^T Phi_i + sigma2 Lambda^{-1}) xi_hat = Phi_i^T (Y_i - mu_i),

which stays well posed when ``sigma2 = 0`` and the subject has at least ``K``
informative times (where ``Sigma_i`` itself is singular).  The N x N form is
used only when the K x K system is singular, i.e. ``sigma2 = 0`` with fewer
informative times than components.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .dataset import SparseDataset, SubjectRecord
from .dynamics import DynamicsEstimate
from .eigenbasis import EigenSystem
from .errors import EstimationError, SingularSystemError
from .smoothing import MomentEstimates

logger = logging.getLogger(__name__)

SIGMA_FLOOR_FRAC = 1e-8
RCOND_MIN = 1e-12


@dataclass(frozen=True)
class SubjectFit:
    """PACE scores and fitted grid trajectories for one subject."""

    id: str
    scores: np.ndarray
    xhat: np.ndarray
    dxhat: np.ndarray
    zhat: np.ndarray


def sigma_floor(moments: MomentEstimates) -> float:
    """``1e-8 * trace(G) / M``, the variance added when ``sigma2`` is zero."""
    return SIGMA_FLOOR_FRAC * float(np.trace(moments.G)) / moments.grid.size


def effective_sigma2(moments: MomentEstimates, use_floor: bool = True) -> float:
    if moments.sigma2 > 0 or not use_floor:
        return float(moments.sigma2)
    return sigma_floor(moments)


def _well_conditioned(A: np.ndarray, ref: float) -> bool:
    # ref keeps tiny 1 x 1 systems from passing a purely relative test
    s = np.linalg.svd(A, compute_uv=False)
    return bool(s[-1] > RCOND_MIN * max(s[0], ref))


def conditional_scores(
    subject: SubjectRecord,
    moments: MomentEstimates,
    eig: EigenSystem,
    use_sigma_floor: bool = True,
) -> np.ndarray:
    """Conditional expectation of the ``K`` scores given the subject's data.

    Grid functions are linearly interpolated to the observation times.  With
    ``use_sigma_floor`` (default) a zero ``sigma2`` is replaced by
    :func:`sigma_floor`.  Raises :class:`SingularSystemError` carrying the
    subject id when neither form of the system is invertible.
    """
    grid = moments.grid
    phi = grid.interp(eig.phis, subject.times).T  # (N, K)
    resid = subject.values - grid.interp(moments.mu, subject.times)
    lam = eig.lambdas
    s2 = effective_sigma2(moments, use_sigma_floor)

    n = subject.n_obs
    A = phi.T @ phi + s2 * np.diag(1.0 / lam)
    if _well_conditioned(A, n * float(np.max(eig.phis**2))):
        return np.linalg.solve(A, phi.T @ resid)
    Sigma = (phi * lam) @ phi.T + s2 * np.eye(n)
    if _well_conditioned(Sigma, n * float(np.max(lam @ eig.phis**2))):
        return lam * (phi.T @ np.linalg.solve(Sigma, resid))
    raise SingularSystemError(
        f"subject {subject.id!r}: conditioning matrix is singular (sigma2={s2:.3g}, {subject.n_obs} observations)",
        subject_id=subject.id,
    )


def fit_subject(
    subject: SubjectRecord,
    moments: MomentEstimates,
    eig: EigenSystem,
    dyn: DynamicsEstimate,
    use_sigma_floor: bool = True,
) -> SubjectFit:
    """Scores plus fitted ``X``, ``X'`` and drift path on the grid.

    The drift path is the rearranged dynamic equation
    ``zhat = dxhat - dmu - beta (xhat - mu)``.
    """
    if eig.dphis is None:
        raise ValueError("eigensystem has no derivative functions")
    xi = conditional_scores(subject, moments, eig, use_sigma_floor)
    xhat = moments.mu + xi @ eig.phis
    dxhat = moments.dmu + xi @ eig.dphis
    zhat = dxhat - moments.dmu - dyn.beta * (xhat - moments.mu)
    return SubjectFit(subject.id, xi, xhat, dxhat, zhat)


def fit_all(
    data: SparseDataset,
    moments: MomentEstimates,
    eig: EigenSystem,
    dyn: DynamicsEstimate,
    use_sigma_floor: bool = True,
) -> Tuple[List[SubjectFit], List[Tuple[str, str]]]:
    """Fit every subject; singular subjects are collected, not fatal.

    Returns ``(fits, failures)`` with failures as ``(subject_id, message)``.
    Raises :class:`EstimationError` when every subject fails.
    """
    fits, failures = [], []
    for subj in data.subjects:
        try:
            fits.append(fit_subject(subj, moments, eig, dyn, use_sigma_floor))
        except SingularSystemError as exc:
            logger.warning("%s", exc)
            failures.append((subj.id, str(exc)))
    if not fits:
        ids = ", ".join(repr(sid) for sid, _ in failures[:5])
        more = "" if len(failures) <= 5 else f" and {len(failures) - 5} more"
        raise EstimationError(f"PACE failed for all {len(failures)} subjects ({ids}{more}): {failures[0][1]}")
    return fits, failures


def drift_scores(fits: Sequence[SubjectFit], drift_eig: EigenSystem) -> np.ndarray:
    """Quadrature projections of each ``zhat`` on the drift eigenfunctions, ``(n, K_z)``."""
    Z = np.array([f.zhat for f in fits])
    return (Z * drift_eig.grid.quad_weights) @ drift_eig.phis.T


def drift_score_extremes(
    fits: Sequence[SubjectFit], drift_eig: Optional[EigenSystem], top: int = 3
) -> List[dict]:
    """Per drift component, the ``top`` subjects ranked by absolute projection score."""
    if drift_eig is None or not fits:
        return []
    if top < 1:
        raise ValueError("top must be at least 1")
    S = drift_scores(fits, drift_eig)
    out = []
    for k in range(drift_eig.K):
        order = np.argsort(-np.abs(S[:, k]), kind="stable")[:top]
        out.append(
            {
                "component": k + 1,
                "rho": float(drift_eig.lambdas[k]),
                "subjects": [{"id": fits[i].id, "score": float(S[i, k])} for i in order],
            }
        )
    return out
