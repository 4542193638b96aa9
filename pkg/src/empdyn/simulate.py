"""Gaussian processes with known eigensystems, analytic oracles, forward solver.

Truth processes use the cosine basis ``phi_k(t) = sqrt(2/L) cos(2 k pi (t-a)/L)``
on ``[a, b]`` (``L = b - a``), which is orthonormal in L2 and whose derivatives
are available in closed form.  Every random draw comes from a Philox
(counter-based) generator with one spawned stream per subject, so datasets
are bit-reproducible across platforms.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .dataset import EvalGrid, SparseDataset, SubjectRecord
from .eigenbasis import EigenSystem, TruncationRule, eigendecompose
from .errors import ConfigError, DegenerateInputError
from .smoothing import MomentEstimates

ORACLE_TERMS = 200
LAMBDA_RULES = ("k^-4", "2^-k", "custom")


def lambda_sequence(rule: str, k_terms: int, lambdas: Optional[Sequence[float]] = None) -> np.ndarray:
    k = np.arange(1, k_terms + 1, dtype=float)
    if rule == "k^-4":
        return k**-4
    if rule == "2^-k":
        return 2.0**-k
    if rule == "custom":
        if lambdas is None:
            raise ConfigError("custom eigenvalue rule needs explicit lambdas")
        out = np.zeros(k_terms)
        lam = np.asarray(lambdas, dtype=float)[:k_terms]
        out[: lam.size] = lam
        return out
    raise ConfigError(f"unknown eigenvalue rule {rule!r}; choose from {LAMBDA_RULES}")


@dataclass(frozen=True)
class TruthSpec:
    """Known process: mean, cosine eigenbasis with given eigenvalues, noise, design.

    ``mu`` is ``{"poly": [c0, c1, ...]}`` for ``sum c_j t**j`` or
    ``{"cos": [c0, c1, ...]}`` for ``c0 + sum_j c_j cos(2 j pi (t-a)/L)``.
    ``sampling`` is ``{"kind": "dense", "m_obs": int}`` (equally spaced) or
    ``{"kind": "sparse", "n_min": int, "n_max": int}`` (uniform i.i.d. times).
    """

    lambdas: Tuple[float, ...]
    mu: dict = field(default_factory=lambda: {"poly": [0.0]})
    sigma2: float = 0.0
    domain: Tuple[float, float] = (0.0, 1.0)
    sampling: dict = field(default_factory=lambda: {"kind": "sparse", "n_min": 2, "n_max": 8})
    seed: int = 0
    basis: str = "trig-cos"

    def __post_init__(self):
        lam = tuple(float(x) for x in self.lambdas)
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "domain", tuple(float(x) for x in self.domain))
        if not lam or any(x <= 0 for x in lam) or any(a <= b for a, b in zip(lam, lam[1:])):
            raise ConfigError("lambdas must be positive and strictly decreasing")
        if self.basis != "trig-cos":
            raise ConfigError(f"unsupported basis {self.basis!r}")
        if not self.sigma2 >= 0:
            raise ConfigError("sigma2 must be nonnegative")
        if not self.domain[0] < self.domain[1]:
            raise ConfigError("degenerate domain")
        if len(self.mu) != 1 or next(iter(self.mu)) not in ("poly", "cos"):
            raise ConfigError("mu must be {'poly': [...]} or {'cos': [...]}")
        kind = self.sampling.get("kind")
        if kind == "dense":
            if int(self.sampling.get("m_obs", 0)) < 2:
                raise ConfigError("dense sampling needs m_obs >= 2")
        elif kind == "sparse":
            lo, hi = int(self.sampling.get("n_min", 0)), int(self.sampling.get("n_max", 0))
            if lo < 1 or hi < max(lo, 2):
                raise ConfigError("sparse sampling needs 1 <= n_min <= n_max and n_max >= 2")
        else:
            raise ConfigError(f"unknown sampling kind {kind!r}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")

    @property
    def K(self) -> int:
        return len(self.lambdas)

    @property
    def length(self) -> float:
        return self.domain[1] - self.domain[0]

    def _phase(self, t):
        return 2 * np.pi * (np.asarray(t, float) - self.domain[0]) / self.length

    def mean(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        kind, coef = next(iter(self.mu.items()))
        if kind == "poly":
            return np.polynomial.polynomial.polyval(t, coef) * np.ones_like(t)
        x = self._phase(t)
        return coef[0] + sum(c * np.cos(j * x) for j, c in enumerate(coef[1:], start=1)) * np.ones_like(t)

    def dmean(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        kind, coef = next(iter(self.mu.items()))
        if kind == "poly":
            d = np.polynomial.polynomial.polyder(coef) if len(coef) > 1 else [0.0]
            return np.polynomial.polynomial.polyval(t, d) * np.ones_like(t)
        x = self._phase(t)
        w = 2 * np.pi / self.length
        return -sum(c * j * w * np.sin(j * x) for j, c in enumerate(coef[1:], start=1)) * np.ones_like(t)

    def phi(self, t) -> np.ndarray:
        """``(K, len(t))`` eigenfunction values."""
        k = np.arange(1, self.K + 1)[:, None]
        return math.sqrt(2 / self.length) * np.cos(k * self._phase(t)[None, :])

    def dphi(self, t) -> np.ndarray:
        k = np.arange(1, self.K + 1)[:, None]
        w = 2 * np.pi / self.length
        return -math.sqrt(2 / self.length) * k * w * np.sin(k * self._phase(t)[None, :])

    def beta(self, t, floor_frac: float = 1e-6) -> np.ndarray:
        """Exact ``beta(t)`` at arbitrary times.

        ``var X`` peaks at the domain start, so the floor is
        ``floor_frac * (2 / L) * sum(lambdas)``, matching the grid convention.
        """
        t = np.atleast_1d(np.asarray(t, float))
        lam = np.asarray(self.lambdas)[:, None]
        phi, dphi = self.phi(t), self.dphi(t)
        varX = np.sum(lam * phi * phi, axis=0)
        floor = floor_frac * 2.0 / self.length * float(np.sum(lam))
        return np.sum(lam * phi * dphi, axis=0) / np.maximum(varX, floor)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        d["domain"] = list(self.domain)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TruthSpec":
        known = {"lambdas", "mu", "sigma2", "domain", "sampling", "seed", "basis"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown TruthSpec keys: {sorted(extra)}")
        if "lambdas" not in d:
            raise ConfigError("TruthSpec needs 'lambdas'")
        kw = dict(d)
        kw["lambdas"] = tuple(kw["lambdas"])
        if "domain" in kw:
            kw["domain"] = tuple(kw["domain"])
        return cls(**kw)

    @classmethod
    def from_json(cls, path) -> "TruthSpec":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"spec file not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"{path}: invalid TruthSpec ({exc})") from exc


@dataclass(frozen=True)
class TruthRecord:
    """Hidden truth behind a simulated dataset: scores per subject."""

    spec: TruthSpec
    ids: Tuple[str, ...]
    xi: np.ndarray

    def path(self, i: int, t) -> np.ndarray:
        return self.spec.mean(t) + self.xi[i] @ self.spec.phi(t)

    def dpath(self, i: int, t) -> np.ndarray:
        return self.spec.dmean(t) + self.xi[i] @ self.spec.dphi(t)

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "ids": list(self.ids), "xi": self.xi.tolist()}


def subject_streams(seed: int, n: int):
    """One independent Philox generator per subject."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def sample_dataset(spec: TruthSpec, n: int) -> Tuple[SparseDataset, TruthRecord]:
    """Draw ``n`` subjects: ``xi_k ~ N(0, lambda_k)``, ``Y = X(T) + N(0, sigma2)``."""
    if int(n) != n or n < 1:
        raise ConfigError(f"number of subjects must be a positive integer, got {n}")
    n = int(n)
    a, b = spec.domain
    width = len(str(n))
    sd = np.sqrt(np.asarray(spec.lambdas))
    noise_sd = math.sqrt(spec.sigma2)
    subjects, ids, xis = [], [], []
    for i, rng in enumerate(subject_streams(spec.seed, n)):
        xi = rng.normal(0.0, 1.0, spec.K) * sd
        if spec.sampling["kind"] == "dense":
            times = np.linspace(a, b, int(spec.sampling["m_obs"]))
        else:
            n_i = int(rng.integers(spec.sampling["n_min"], spec.sampling["n_max"] + 1))
            times = np.sort(rng.uniform(a, b, n_i))
            while np.any(np.diff(times) <= 0):
                times = np.sort(rng.uniform(a, b, n_i))
        values = spec.mean(times) + xi @ spec.phi(times)
        if noise_sd > 0:
            values = values + rng.normal(0.0, noise_sd, times.size)
        sid = f"s{i + 1:0{width}d}"
        subjects.append(SubjectRecord(sid, times, values))
        ids.append(sid)
        xis.append(xi)
    data = SparseDataset(tuple(subjects), (a, b))
    return data, TruthRecord(spec, tuple(ids), np.array(xis))


# ---------------------------------------------------------------------------
# oracles


def truth_eigensystem(spec: TruthSpec, grid: EvalGrid) -> EigenSystem:
    """Exact eigensystem (with derivatives) of a truth spec on ``grid``."""
    lam = np.asarray(spec.lambdas)
    fve = np.cumsum(lam) / np.sum(lam)
    return EigenSystem(grid, lam, spec.phi(grid.points), fve, spec.dphi(grid.points), lam.copy())


def truth_moments(spec: TruthSpec, grid: EvalGrid) -> MomentEstimates:
    """Exact mean, covariance and derivative surfaces of a truth spec."""
    t = grid.points
    lam = np.asarray(spec.lambdas)
    phi, dphi = spec.phi(t), spec.dphi(t)
    G = (phi.T * lam) @ phi
    dG = (dphi.T * lam) @ phi
    return MomentEstimates(grid, spec.mean(t), spec.dmean(t), 0.5 * (G + G.T), dG, spec.sigma2)


def analytic_r2(
    lambda_rule: str = "k^-4",
    k_terms: int = ORACLE_TERMS,
    grid: Optional[EvalGrid] = None,
    lambdas: Optional[Sequence[float]] = None,
    floor_frac: float = 1e-6,
) -> np.ndarray:
    """``R2(t)`` for the cosine basis on [0, 1] by direct summation.

    With ``phi_k = sqrt(2) cos(2 k pi t)`` and ``phi_k' = -2 sqrt(2) k pi sin(2 k pi t)``
    the constants cancel, leaving

        R2 = [sum lambda_k k cos sin]**2 / ([sum lambda_k cos**2] [sum lambda_k k**2 sin**2]).

    Both denominator sums are floored at ``floor_frac`` times their maximum
    over the grid, so the removable 0/0 points (where every sine vanishes)
    evaluate to 0.
    """
    if k_terms < 1:
        raise ConfigError("k_terms must be >= 1")
    if grid is None:
        from .dataset import make_grid

        grid = make_grid((0.0, 1.0), 201)
    lam = lambda_sequence(lambda_rule, k_terms, lambdas)
    k = np.arange(1, k_terms + 1, dtype=float)[:, None]
    x = 2 * np.pi * k * grid.points[None, :]
    c, s = np.cos(x), np.sin(x)
    lk = lam[:, None]
    num = np.sum(lk * k * c * s, axis=0) ** 2
    d_level = np.sum(lk * c * c, axis=0)
    d_slope = np.sum(lk * k * k * s * s, axis=0)
    d_level = np.maximum(d_level, floor_frac * np.max(d_level))
    d_slope = np.maximum(d_slope, floor_frac * np.max(d_slope))
    return np.clip(num / (d_level * d_slope), 0.0, 1.0)


def analytic_dynamics(
    spec: TruthSpec,
    grid: EvalGrid,
    floor_frac: float = 1e-6,
    selector: TruncationRule = TruncationRule(fve=1.0, k_max=50),
):
    """True ``beta``, ``V``, ``R2`` and ``Gz`` of a truth spec by direct summation.

    Evaluated independently of :mod:`empdyn.dynamics` (trigonometric sums in
    closed form) so the two can check each other; uses the same flooring
    convention.
    """
    from .dynamics import DynamicsEstimate

    L = spec.length
    k = np.arange(1, spec.K + 1, dtype=float)[:, None]
    x = 2 * np.pi * k * (grid.points[None, :] - spec.domain[0]) / L
    lam = np.asarray(spec.lambdas)[:, None]
    amp = 2.0 / L
    c, s = np.cos(x), np.sin(x)
    w = 2 * np.pi / L
    varX = amp * np.sum(lam * c * c, axis=0)
    varDX = amp * w * w * np.sum(lam * k * k * s * s, axis=0)
    cov = -amp * w * np.sum(lam * k * s * c, axis=0)
    x_floor = floor_frac * np.max(varX)
    dx_floor = floor_frac * np.max(varDX)
    varX_eff = np.maximum(varX, x_floor)
    n_x = int(np.sum(varX < x_floor))
    n_dx = int(np.sum(varDX < dx_floor))
    beta = cov / varX_eff
    V = np.maximum(varDX - cov**2 / varX_eff, 0.0)
    R2 = np.clip(cov**2 / (varX_eff * np.maximum(varDX, dx_floor)), 0.0, 1.0)

    # Gz(t, s) = sum lambda_k r_k(t) r_k(s) with r_k = phi_k' - beta phi_k, plus the floor correction
    r = math.sqrt(amp) * (-w * k * s - beta[None, :] * c)
    Gz = (r.T * lam[:, 0]) @ r
    Gz[np.diag_indices_from(Gz)] += beta**2 * (varX_eff - varX)
    Gz = 0.5 * (Gz + Gz.T)
    try:
        drift = eigendecompose(Gz, grid, selector, scale=float(grid.integrate(varDX)))
    except DegenerateInputError:
        drift = None
    return DynamicsEstimate(grid, beta, varX_eff, varDX, cov, V, R2, Gz, drift, {"varX": n_x, "varDX": n_dx})


# ---------------------------------------------------------------------------
# forward integration


def _as_function(f, t: np.ndarray, name: str):
    if callable(f):
        return lambda u: np.asarray(f(u), dtype=float) * np.ones_like(u)
    arr = np.asarray(f, dtype=float)
    if arr.shape != t.shape:
        raise ValueError(f"{name} must be a grid function or a callable")
    return lambda u: np.interp(u, t, arr)


def integrate_forward(
    x0: float,
    beta,
    z_path,
    mu,
    grid: EvalGrid,
    steps_per_cell: int = 10,
) -> np.ndarray:
    """Solve ``x' = mu' + beta (x - mu) + z`` from ``x(a) = x0`` by classical RK4.

    Works on the centered state ``y = x - mu``, which obeys ``y' = beta y + z``,
    so the mean enters only through its values and ``mu'`` is never needed.
    ``beta``, ``z_path`` and ``mu`` are grid functions (linearly interpolated
    between grid points) or callables evaluated exactly at every stage.  Each
    grid cell is split into ``steps_per_cell`` RK4 steps.  Returns ``x`` on
    the grid.
    """
    if int(steps_per_cell) != steps_per_cell or steps_per_cell < 1:
        raise ConfigError("steps_per_cell must be a positive integer")
    t = grid.points
    b_fn = _as_function(beta, t, "beta")
    z_fn = _as_function(z_path, t, "z_path")
    mu_fn = _as_function(mu, t, "mu")
    spc = int(steps_per_cell)
    fine = np.linspace(t[0], t[-1], (t.size - 1) * spc + 1)
    fine[::spc] = t
    half = 0.5 * (fine[:-1] + fine[1:])
    b_node, z_node = b_fn(fine), z_fn(fine)
    b_half, z_half = b_fn(half), z_fn(half)

    y = np.empty(fine.size)
    y[0] = x0 - float(mu_fn(t[:1])[0])
    for n in range(fine.size - 1):
        dt = fine[n + 1] - fine[n]
        yn = y[n]
        k1 = b_node[n] * yn + z_node[n]
        k2 = b_half[n] * (yn + 0.5 * dt * k1) + z_half[n]
        k3 = b_half[n] * (yn + 0.5 * dt * k2) + z_half[n]
        k4 = b_node[n + 1] * (yn + dt * k3) + z_node[n + 1]
        y[n + 1] = yn + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6
    return mu_fn(t) + y[::spc]
