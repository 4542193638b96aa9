"""Pooled local polynomial smoothing of mean and covariance functions.

All subjects' observations are pooled into one scatterplot.  The mean and its
derivative come from local polynomial fits of degree ``deriv + 1``; the
covariance surface and its partial derivative in the first argument come from
fits to pairwise raw covariances ``(Y_ij - mu(T_ij)) (Y_il - mu(T_il))`` with
``j != l``, using degree ``deriv + 1`` in ``t`` and degree 1 in ``s``.

Fits for every grid point are assembled at once from kernel-weighted moment
sums.  Observations sharing the same design location are binned first; for
weighted least squares this is exact (the fit depends on the data only
through counts and sums at each location).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import integrate
from scipy.special import erf

from .dataset import EvalGrid, SparseDataset
from .errors import ConfigError, EstimationWarning, SingularSystemError

logger = logging.getLogger(__name__)

MAX_WIDENINGS = 6
WIDEN_FACTOR = 1.5
RCOND_MIN = 1e-10
DERIV_BANDWIDTH_FACTOR = 1.5
N_CANDIDATES = 10
MIN_CV_SUBJECTS = 20
COV_CV_FOLDS = 5
DENSE_BIN_LIMIT = 4_000_000

KERNEL_FAMILIES = ("epanechnikov", "gaussian-truncated")
_GAUSS_CUT = 3.0


@dataclass(frozen=True)
class KernelSpec:
    """Nonnegative, bounded, compactly supported smoothing density.

    The bivariate kernel used for covariance smoothing is the tensor product
    of this univariate density with itself.
    """

    family: str = "epanechnikov"

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ConfigError(f"unknown kernel family {self.family!r}; choose from {KERNEL_FAMILIES}")

    @property
    def support(self) -> float:
        return 1.0 if self.family == "epanechnikov" else _GAUSS_CUT

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        if self.family == "epanechnikov":
            return np.where(np.abs(u) < 1.0, 0.75 * (1.0 - u * u), 0.0)
        norm = math.sqrt(2.0 * math.pi) * erf(_GAUSS_CUT / math.sqrt(2.0))
        return np.where(np.abs(u) <= _GAUSS_CUT, np.exp(-0.5 * u * u) / norm, 0.0)

    def moment(self, order: int) -> float:
        """``integral u**order kernel(u) du`` by adaptive quadrature."""
        c = self.support
        val, _ = integrate.quad(lambda u: u**order * float(self(u)), -c, c, epsabs=1e-13, epsrel=1e-13)
        return val


@dataclass(frozen=True)
class SmoothConfig:
    """Bandwidths (in time units) for the four smoothing steps."""

    h_mu0: float
    h_mu1: float
    h_G0: float
    h_G1: float
    kernel: KernelSpec = KernelSpec()
    bandwidth_mode: str = "fixed"

    def __post_init__(self):
        for name in ("h_mu0", "h_mu1", "h_G0", "h_G1"):
            h = getattr(self, name)
            if not (isinstance(h, (int, float)) and math.isfinite(h) and h > 0):
                raise ConfigError(f"{name} must be a positive number, got {h!r}")
        if self.bandwidth_mode not in ("fixed", "cross-validated"):
            raise ConfigError(f"unknown bandwidth mode {self.bandwidth_mode!r}")

    def check_domain(self, domain) -> None:
        width = domain[1] - domain[0]
        for name in ("h_mu0", "h_mu1", "h_G0", "h_G1"):
            if getattr(self, name) >= width:
                raise ConfigError(f"{name}={getattr(self, name)} is not below the domain width {width}")

    @classmethod
    def from_level(cls, h_mu0: float, h_G0: float, kernel: KernelSpec = KernelSpec(), mode: str = "fixed"):
        """Derivative bandwidths set to 1.5 times the level bandwidths."""
        return cls(h_mu0, DERIV_BANDWIDTH_FACTOR * h_mu0, h_G0, DERIV_BANDWIDTH_FACTOR * h_G0, kernel, mode)

    def as_dict(self) -> dict:
        return {
            "h_mu0": self.h_mu0,
            "h_mu1": self.h_mu1,
            "h_G0": self.h_G0,
            "h_G1": self.h_G1,
            "kernel": self.kernel.family,
            "bandwidth_mode": self.bandwidth_mode,
        }


@dataclass(frozen=True)
class MomentEstimates:
    """Smoothed first and second moments on an evaluation grid."""

    grid: EvalGrid
    mu: np.ndarray
    dmu: np.ndarray
    G: np.ndarray
    dG: np.ndarray
    sigma2: float
    config: Optional[SmoothConfig] = None

    def __post_init__(self):
        m = self.grid.size
        for name, shape in (("mu", (m,)), ("dmu", (m,)), ("G", (m, m)), ("dG", (m, m))):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, arr)
        if np.max(np.abs(self.G - self.G.T)) > 1e-10 * max(1.0, np.max(np.abs(self.G))):
            raise ValueError("G is not symmetric")
        if not (self.sigma2 >= 0):
            raise ValueError("sigma2 must be nonnegative")


# ---------------------------------------------------------------------------
# binning and raw covariances


def _bin_locations(x: np.ndarray, y: np.ndarray):
    """Unique locations with observation counts and sums of responses."""
    ux, inv = np.unique(x, return_inverse=True)
    count = np.bincount(inv, minlength=ux.size).astype(float)
    ysum = np.bincount(inv, weights=y, minlength=ux.size)
    return ux, count, ysum


def raw_covariances(data: SparseDataset, grid: EvalGrid, mu_hat: np.ndarray, include_diagonal: bool = False):
    """Pooled raw covariances as arrays ``(t, s, value)``.

    Every ordered pair ``j != l`` within a subject contributes one entry;
    ``include_diagonal=True`` also adds the ``j == l`` squares.
    """
    ts, ss, vs = [], [], []
    for subj in data.subjects:
        n = subj.n_obs
        if n < 2 and not include_diagonal:
            continue
        resid = subj.values - grid.interp(mu_hat, subj.times)
        j, l = np.nonzero(np.ones((n, n), dtype=bool) if include_diagonal else ~np.eye(n, dtype=bool))
        ts.append(subj.times[j])
        ss.append(subj.times[l])
        vs.append(resid[j] * resid[l])
    if not ts:
        empty = np.empty(0)
        return empty, empty, empty
    return np.concatenate(ts), np.concatenate(ss), np.concatenate(vs)


def _bin_pairs(t: np.ndarray, s: np.ndarray, y: np.ndarray):
    """Bin exact duplicate ``(t, s)`` pairs; returns ``(t, s, count, ysum, ysq)``."""
    ut, inv = np.unique(np.concatenate([t, s]), return_inverse=True)
    ti, si = inv[: t.size], inv[t.size :]
    return _bin_keys(ut, ti.astype(np.int64) * ut.size + si, y)


def _bin_keys(ut: np.ndarray, key: np.ndarray, y: np.ndarray):
    u = ut.size
    if u * u <= DENSE_BIN_LIMIT:
        count = np.bincount(key, minlength=u * u).astype(float)
        ysum = np.bincount(key, weights=y, minlength=u * u)
        ysq = np.bincount(key, weights=y * y, minlength=u * u)
        ukey = np.flatnonzero(count)
        count, ysum, ysq = count[ukey], ysum[ukey], ysq[ukey]
    else:
        ukey, kinv = np.unique(key, return_inverse=True)
        count = np.bincount(kinv, minlength=ukey.size).astype(float)
        ysum = np.bincount(kinv, weights=y, minlength=ukey.size)
        ysq = np.bincount(kinv, weights=y * y, minlength=ukey.size)
    return ut[ukey // u], ut[ukey % u], count, ysum, ysq


def binned_raw_covariances(data: SparseDataset, grid: EvalGrid, mu_hat: np.ndarray, include_diagonal: bool = False):
    """Raw covariances binned by design location: ``(t, s, count, ysum, ysq)``.

    Equivalent to ``_bin_pairs(*raw_covariances(...))`` but indexes pairs by
    position in the pooled set of distinct times, which avoids sorting the
    full pair list when designs share observation times.
    """
    t_all, _, _ = data.pooled()
    ut = np.unique(t_all)
    keys, vals = [], []
    for subj in data.subjects:
        n = subj.n_obs
        if n < 2 and not include_diagonal:
            continue
        resid = subj.values - grid.interp(mu_hat, subj.times)
        pos = np.searchsorted(ut, subj.times).astype(np.int64)
        j, l = np.nonzero(np.ones((n, n), dtype=bool) if include_diagonal else ~np.eye(n, dtype=bool))
        keys.append(pos[j] * ut.size + pos[l])
        vals.append(resid[j] * resid[l])
    if not keys:
        empty = np.empty(0)
        return empty, empty, empty, empty, empty
    return _bin_keys(ut, np.concatenate(keys), np.concatenate(vals))


# ---------------------------------------------------------------------------
# one-dimensional local polynomial fits


def _well_posed(N: np.ndarray, distinct: np.ndarray, n_params: int) -> np.ndarray:
    """Mask of normal matrices with enough support and acceptable conditioning."""
    ok = distinct >= n_params
    s0 = N[..., 0, 0]
    ok &= s0 > 0
    if np.any(ok):
        scaled = N[ok] / s0[ok][:, None, None]
        ev = np.linalg.eigvalsh(scaled)
        good = ev[:, 0] > RCOND_MIN * ev[:, -1]
        idx = np.flatnonzero(ok)
        ok.reshape(-1)[idx[~good]] = False
    return ok


def _fit_1d_at(x, count, ysum, t, h, degree, kernel):
    """Local polynomial fits at points ``t`` with per-point bandwidths ``h``.

    Returns coefficients of the scaled basis ``((x - t) / h) ** m`` and a mask
    of well-posed points.
    """
    U = (x[None, :] - t[:, None]) / h[:, None]
    K = kernel(U)
    p = degree + 1
    S = np.empty((t.size, 2 * degree + 1))
    R = np.empty((t.size, p))
    KU = K.copy()
    for a in range(2 * degree + 1):
        S[:, a] = KU @ count
        if a < p:
            R[:, a] = KU @ ysum
        KU *= U
    ij = np.add.outer(np.arange(p), np.arange(p))
    N = S[:, ij]
    distinct = np.count_nonzero(K > 0, axis=1)
    ok = _well_posed(N, distinct, p)
    coef = np.full((t.size, p), np.nan)
    if np.any(ok):
        coef[ok] = np.linalg.solve(N[ok], R[ok][..., None])[..., 0]
    return coef, ok


def _local_poly_1d(x, y, t, h, degree, kernel, what):
    """Local polynomial regression with geometric window widening.

    Returns the coefficient array (unscaled, i.e. coefficients of
    ``(x - t) ** m``) at every point of ``t``.
    """
    ux, count, ysum = _bin_locations(np.asarray(x, float), np.asarray(y, float))
    t = np.asarray(t, float)
    hs = np.full(t.size, float(h))
    coef = np.full((t.size, degree + 1), np.nan)
    todo = np.arange(t.size)
    for level in range(MAX_WIDENINGS + 1):
        c, ok = _fit_1d_at(ux, count, ysum, t[todo], hs[todo], degree, kernel)
        coef[todo[ok]] = c[ok]
        todo = todo[~ok]
        if todo.size == 0:
            break
        if level < MAX_WIDENINGS:
            hs[todo] *= WIDEN_FACTOR
    if todo.size:
        raise SingularSystemError(
            f"{what}: singular local fit at t={t[todo[0]]:.6g} after {MAX_WIDENINGS} widenings"
        )
    widened = hs > h
    if np.any(widened):
        msg = (
            f"{what}: window widened at {int(widened.sum())} of {t.size} points "
            f"(bandwidth {h:.6g} -> max {hs.max():.6g})"
        )
        logger.warning(msg)
        warnings.warn(msg, EstimationWarning, stacklevel=3)
    return coef / hs[:, None] ** np.arange(degree + 1)


def smooth_mean(data: SparseDataset, grid: EvalGrid, cfg: SmoothConfig, deriv: int = 0) -> np.ndarray:
    """Mean function (``deriv=0``) or its derivative (``deriv=1``) on the grid.

    Fits a local polynomial of degree ``deriv + 1`` in ``T_ij - t`` to the
    pooled scatterplot and returns ``alpha_deriv * deriv!``.
    """
    if deriv not in (0, 1):
        raise ValueError("deriv must be 0 or 1")
    t, y, _ = data.pooled()
    h = cfg.h_mu0 if deriv == 0 else cfg.h_mu1
    coef = _local_poly_1d(t, y, grid.points, h, deriv + 1, cfg.kernel, f"mean (deriv={deriv})")
    return coef[:, deriv] * math.factorial(deriv)


# ---------------------------------------------------------------------------
# two-dimensional covariance fits


def _cov_basis_moments(deg_t: int):
    """Index bookkeeping for the basis ``[1, u, ..., u**deg_t, v]``."""
    p = deg_t + 2
    lhs = {}
    for i in range(p):
        for j in range(p):
            a = (i if i <= deg_t else 0) + (j if j <= deg_t else 0)
            b = int(i > deg_t) + int(j > deg_t)
            lhs[(i, j)] = (a, b)
    rhs = [(a, 0) for a in range(deg_t + 1)] + [(0, 1)]
    return p, lhs, rhs


def _fit_2d_block(tp, sp, count, ysum, rows, cols, h, deg_t, kernel, chunk=8192):
    """Local fits at all ``(rows[i], cols[j])`` with a common bandwidth ``h``."""
    p, lhs, rhs = _cov_basis_moments(deg_t)
    needed = sorted(set(lhs.values()))
    mom = {key: np.zeros((rows.size, cols.size)) for key in needed}
    rmom = {key: np.zeros((rows.size, cols.size)) for key in rhs}
    distinct = np.zeros((rows.size, cols.size))
    for start in range(0, tp.size, chunk):
        sl = slice(start, start + chunk)
        U = (tp[None, sl] - rows[:, None]) / h
        V = (sp[None, sl] - cols[:, None]) / h
        Ku, Kv = kernel(U), kernel(V)
        upow = [Ku]
        for _ in range(2 * deg_t):
            upow.append(upow[-1] * U)
        vpow = [Kv, Kv * V, Kv * V * V]
        c, ys = count[sl], ysum[sl]
        for a, b in needed:
            mom[(a, b)] += (upow[a] * c) @ vpow[b].T
        for a, b in rhs:
            rmom[(a, b)] += (upow[a] * ys) @ vpow[b].T
        distinct += (Ku > 0).astype(float) @ (Kv > 0).astype(float).T
    N = np.empty((rows.size, cols.size, p, p))
    for (i, j), key in lhs.items():
        N[..., i, j] = mom[key]
    R = np.stack([rmom[key] for key in rhs], axis=-1)
    ok = _well_posed(N, distinct, p)
    coef = np.full((rows.size, cols.size, p), np.nan)
    if np.any(ok):
        coef[ok] = np.linalg.solve(N[ok], R[ok][..., None])[..., 0]
    return coef, ok


def _local_poly_2d(tp, sp, count, ysum, points, h, deg_t, kernel, what, report=True):
    """Surface fits on ``points x points`` with per-pair window widening.

    Returns the coefficient of ``u ** m`` (unscaled) for ``m = 0..deg_t``.
    """
    m = points.size
    coef = np.full((m, m, deg_t + 1), np.nan)
    hs = np.full((m, m), float(h))
    todo = np.ones((m, m), dtype=bool)
    for level in range(MAX_WIDENINGS + 1):
        ri = np.flatnonzero(todo.any(axis=1))
        ci = np.flatnonzero(todo.any(axis=0))
        hl = h * WIDEN_FACTOR**level
        c, ok = _fit_2d_block(tp, sp, count, ysum, points[ri], points[ci], hl, deg_t, kernel)
        sub_todo = todo[np.ix_(ri, ci)]
        take = sub_todo & ok
        rr, cc = np.nonzero(take)
        coef[ri[rr], ci[cc]] = c[rr, cc, : deg_t + 1] / hl ** np.arange(deg_t + 1)
        hs[ri[rr], ci[cc]] = hl
        todo[ri[rr], ci[cc]] = False
        if not todo.any():
            break
    if todo.any():
        i, j = np.argwhere(todo)[0]
        raise SingularSystemError(
            f"{what}: singular local fit at (t, s)=({points[i]:.6g}, {points[j]:.6g}) "
            f"after {MAX_WIDENINGS} widenings"
        )
    widened = hs > h
    if np.any(widened):
        msg = (
            f"{what}: window widened at {int(widened.sum())} of {m * m} grid pairs "
            f"(bandwidth {h:.6g} -> max {hs.max():.6g})"
        )
        if report:
            logger.warning(msg)
            warnings.warn(msg, EstimationWarning, stacklevel=3)
        else:
            logger.debug(msg)
    return coef


def _smooth_surface(binned, grid, h, deriv, kernel, what, report=True):
    bt, bs, count, ysum, _ = binned
    if bt.size == 0:
        raise SingularSystemError(f"{what}: no raw covariance pairs (need a subject with two observations)")
    coef = _local_poly_2d(bt, bs, count, ysum, grid.points, h, deriv + 1, kernel, what, report)
    out = coef[..., deriv] * math.factorial(deriv)
    if deriv == 0:
        out = 0.5 * (out + out.T)
    return out


def smooth_cov(
    data: SparseDataset,
    grid: EvalGrid,
    cfg: SmoothConfig,
    mu_hat: np.ndarray,
    deriv: int = 0,
    include_diagonal: bool = False,
) -> np.ndarray:
    """Covariance surface ``G`` (``deriv=0``) or ``dG/dt`` (``deriv=1``) on the grid.

    Row index is ``t`` (the differentiated argument), column index is ``s``.
    The ``deriv=0`` surface is symmetrized.  ``include_diagonal`` exists only
    to demonstrate the noise inflation that diagonal exclusion avoids.
    """
    if deriv not in (0, 1):
        raise ValueError("deriv must be 0 or 1")
    binned = binned_raw_covariances(data, grid, mu_hat, include_diagonal)
    h = cfg.h_G0 if deriv == 0 else cfg.h_G1
    return _smooth_surface(binned, grid, h, deriv, cfg.kernel, f"covariance (deriv={deriv})")


def estimate_sigma2(
    data: SparseDataset,
    grid: EvalGrid,
    cfg: SmoothConfig,
    mu_hat: np.ndarray,
    G_hat: np.ndarray,
) -> float:
    """Measurement error variance from the diagonal raw covariances.

    Smooths the squared residuals with a local linear fit and averages their
    excess over ``diag(G_hat)`` across the central half of the domain.
    """
    t, y, _ = data.pooled()
    resid2 = (y - grid.interp(mu_hat, t)) ** 2
    coef = _local_poly_1d(t, resid2, grid.points, cfg.h_G0, 1, cfg.kernel, "variance diagonal")
    a, b = grid.domain
    q = (b - a) / 4
    central = (grid.points >= a + q) & (grid.points <= b - q)
    excess = float(np.mean(coef[central, 0] - np.diag(G_hat)[central]))
    if excess < 0:
        msg = f"error variance estimate {excess:.3g} is negative; clamped to 0"
        logger.warning(msg)
        warnings.warn(msg, EstimationWarning, stacklevel=2)
        return 0.0
    return excess


def estimate_moments(data: SparseDataset, grid: EvalGrid, cfg: SmoothConfig) -> MomentEstimates:
    """Run all four smoothers and the error-variance step."""
    cfg.check_domain(data.domain)
    mu = smooth_mean(data, grid, cfg, 0)
    dmu = smooth_mean(data, grid, cfg, 1)
    G = smooth_cov(data, grid, cfg, mu, 0)
    dG = smooth_cov(data, grid, cfg, mu, 1)
    sigma2 = estimate_sigma2(data, grid, cfg, mu, G)
    return MomentEstimates(grid, mu, dmu, G, dG, sigma2, cfg)


# ---------------------------------------------------------------------------
# bandwidth selection


def bandwidth_candidates(domain) -> np.ndarray:
    a, b = domain
    return np.geomspace((b - a) / 50, (b - a) / 4, N_CANDIDATES)


def _loso_mean_score(data: SparseDataset, grid: EvalGrid, h: float, kernel: KernelSpec) -> float:
    """Leave-one-subject-out prediction error of the local linear mean."""
    sizes = np.array([s.n_obs for s in data.subjects])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    t, y, idx = data.pooled()
    g = grid.points
    m, n = g.size, data.n_subjects
    per = np.zeros((5, m, n))
    # chunk over whole subjects to bound the M x P temporaries
    bounds = [0]
    for i in range(1, n + 1):
        if offsets[i] - offsets[bounds[-1]] > 20000 or i == n:
            bounds.append(i)
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        sl = slice(offsets[lo], offsets[hi])
        U = (t[None, sl] - g[:, None]) / h
        K = kernel(U)
        starts = offsets[lo:hi] - offsets[lo]
        yy = y[None, sl]
        for q, arr in enumerate((K, K * U, K * U * U, K * yy, K * U * yy)):
            per[q, :, lo:hi] = np.add.reduceat(arr, starts, axis=1)
    loo = per.sum(axis=2, keepdims=True) - per
    S0, S1, S2, T0, T1 = loo
    det = S0 * S2 - S1 * S1
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = (S0 > 0) & (det > RCOND_MIN * S0 * S0)
        fit = np.where(ok, (S2 * T0 - S1 * T1) / det, np.nan)
    j = np.clip(np.searchsorted(g, t, side="right") - 1, 0, m - 2)
    frac = (t - g[j]) / (g[j + 1] - g[j])
    pred = fit[j, idx] * (1 - frac) + fit[j + 1, idx] * frac
    if not np.all(np.isfinite(pred)):
        return math.inf
    return float(np.sum((y - pred) ** 2))


def _cov_cv_scores(data, grid, mu_hat, cands, kernel) -> np.ndarray:
    """Subject-wise K-fold prediction error of the covariance surface per candidate."""
    folds = np.arange(data.n_subjects) % COV_CV_FOLDS
    totals = np.zeros(len(cands))
    g = grid.points
    m = g.size
    for f in range(COV_CV_FOLDS):
        test_idx = np.flatnonzero(folds == f)
        train_idx = np.flatnonzero(folds != f)
        if test_idx.size == 0 or train_idx.size == 0:
            continue
        bt, bs, count, ysum, ysq = binned_raw_covariances(data.subset(test_idx), grid, mu_hat)
        if bt.size == 0:
            continue
        train = binned_raw_covariances(data.subset(train_idx), grid, mu_hat)
        i = np.clip(np.searchsorted(g, bt, side="right") - 1, 0, m - 2)
        j = np.clip(np.searchsorted(g, bs, side="right") - 1, 0, m - 2)
        fi = (bt - g[i]) / (g[i + 1] - g[i])
        fj = (bs - g[j]) / (g[j + 1] - g[j])
        for c, h in enumerate(cands):
            if not math.isfinite(totals[c]):
                continue
            try:
                surf = _smooth_surface(train, grid, h, 0, kernel, "covariance CV", report=False)
            except SingularSystemError:
                totals[c] = math.inf
                continue
            pred = (
                surf[i, j] * (1 - fi) * (1 - fj)
                + surf[i + 1, j] * fi * (1 - fj)
                + surf[i, j + 1] * (1 - fi) * fj
                + surf[i + 1, j + 1] * fi * fj
            )
            totals[c] += float(np.sum(ysq - 2 * pred * ysum + count * pred * pred))
    return totals


def select_mean_bandwidth(data: SparseDataset, grid: EvalGrid, kernel: KernelSpec = KernelSpec()) -> float:
    """Leave-one-subject-out choice of ``h_mu0`` among :func:`bandwidth_candidates`."""
    cands = bandwidth_candidates(data.domain)
    scores = [_loso_mean_score(data, grid, h, kernel) for h in cands]
    if not np.any(np.isfinite(scores)):
        raise SingularSystemError("mean bandwidth CV: no candidate bandwidth gives well-posed fits")
    h = float(cands[int(np.argmin(scores))])
    logger.info("mean CV scores %s -> h_mu0=%.6g", np.round(scores, 6).tolist(), h)
    return h


def select_bandwidths(data: SparseDataset, grid: EvalGrid, kernel: KernelSpec = KernelSpec()) -> SmoothConfig:
    """Cross-validated level bandwidths; derivative bandwidths are 1.5 times larger.

    ``h_mu0`` minimizes leave-one-subject-out error of the local linear mean
    over 10 log-spaced candidates in ``[(b-a)/50, (b-a)/4]``; ``h_G0`` minimizes
    5-fold subject-wise error in predicting held-out raw covariances.  With
    fewer than 20 subjects both fall back to ``(b-a)/10``.
    """
    a, b = data.domain
    if data.n_subjects < MIN_CV_SUBJECTS:
        h = (b - a) / 10
        msg = (
            f"only {data.n_subjects} subjects (< {MIN_CV_SUBJECTS}); "
            f"cross-validation skipped, using default bandwidth {h:.6g}"
        )
        logger.warning(msg)
        warnings.warn(msg, EstimationWarning, stacklevel=2)
        return SmoothConfig.from_level(h, h, kernel, "fixed")

    cands = bandwidth_candidates((a, b))
    h_mu0 = select_mean_bandwidth(data, grid, kernel)

    level = SmoothConfig.from_level(h_mu0, h_mu0, kernel)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EstimationWarning)
        mu_hat = smooth_mean(data, grid, level, 0)
    cov_scores = _cov_cv_scores(data, grid, mu_hat, cands, kernel)
    if not np.any(np.isfinite(cov_scores)):
        raise SingularSystemError("covariance bandwidth CV: no candidate bandwidth gives well-posed fits")
    h_G0 = float(cands[int(np.argmin(cov_scores))])
    logger.info("covariance CV scores %s -> h_G0=%.6g", np.round(cov_scores, 6).tolist(), h_G0)
    return SmoothConfig.from_level(h_mu0, h_G0, kernel, "cross-validated")

