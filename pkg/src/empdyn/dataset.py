"""Sparse longitudinal observations and the evaluation grid.

A :class:`SparseDataset` holds, per subject, the irregular observation times
``T_ij`` and noisy values ``Y_ij``.  All grid functions produced downstream
live on an :class:`EvalGrid`, a uniform grid carrying trapezoid weights so
that integrals reduce to weighted dot products.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError

Interval = Tuple[float, float]

HEADER = ("subject_id", "time", "value")


@dataclass(frozen=True)
class SubjectRecord:
    """Observations of a single subject, times strictly increasing."""

    id: str
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.ndim != 1 or times.shape != values.shape:
            raise DataError(f"subject {self.id!r}: times and values must be 1-d of equal length")
        if times.size == 0:
            raise DataError(f"subject {self.id!r}: no observations")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise DataError(f"subject {self.id!r}: non-finite time or value")
        if np.any(np.diff(times) <= 0):
            raise DataError(f"subject {self.id!r}: times must be strictly increasing")
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def n_obs(self) -> int:
        return int(self.times.size)


@dataclass(frozen=True)
class SparseDataset:
    """A sample of subjects observed on a common closed domain ``[a, b]``."""

    subjects: Tuple[SubjectRecord, ...]
    domain: Interval
    n_dropped: int = 0

    def __post_init__(self):
        subjects = tuple(self.subjects)
        object.__setattr__(self, "subjects", subjects)
        a, b = (float(x) for x in self.domain)
        object.__setattr__(self, "domain", (a, b))
        if not subjects:
            raise DataError("dataset has no subjects")
        if not a < b:
            raise DataError(f"degenerate domain [{a}, {b}]")
        ids = [s.id for s in subjects]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate subject ids")
        for s in subjects:
            if s.times[0] < a or s.times[-1] > b:
                raise DataError(f"subject {s.id!r} has times outside [{a}, {b}]")
        if max(s.n_obs for s in subjects) < 2:
            raise DataError("at least one subject needs two or more observations")

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def ids(self) -> list:
        return [s.id for s in self.subjects]

    def pooled(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return pooled ``(times, values, subject_index)`` over all subjects."""
        t = np.concatenate([s.times for s in self.subjects])
        y = np.concatenate([s.values for s in self.subjects])
        idx = np.repeat(np.arange(self.n_subjects), [s.n_obs for s in self.subjects])
        return t, y, idx

    def subset(self, indices: Iterable[int]) -> "SparseDataset":
        subjects = tuple(self.subjects[i] for i in indices)
        return SparseDataset(subjects, self.domain)

    def map_values(self, fn) -> "SparseDataset":
        subjects = tuple(SubjectRecord(s.id, s.times, fn(s.values)) for s in self.subjects)
        return SparseDataset(subjects, self.domain, self.n_dropped)


@dataclass(frozen=True)
class EvalGrid:
    """Uniform grid on ``[a, b]`` with trapezoid quadrature weights."""

    points: np.ndarray
    quad_weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        weights = np.asarray(self.quad_weights, dtype=float)
        if points.ndim != 1 or points.shape != weights.shape or points.size < 2:
            raise DataError("grid needs at least two points and matching weights")
        if np.any(np.diff(points) <= 0):
            raise DataError("grid points must be strictly increasing")
        if np.any(weights < 0):
            raise DataError("quadrature weights must be nonnegative")
        points.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "quad_weights", weights)

    @property
    def size(self) -> int:
        return int(self.points.size)

    @property
    def domain(self) -> Interval:
        return float(self.points[0]), float(self.points[-1])

    @property
    def spacing(self) -> float:
        return float(self.points[1] - self.points[0])

    def integrate(self, f: np.ndarray, axis: int = -1) -> np.ndarray:
        """Trapezoid integral of grid function(s) along ``axis``."""
        return np.tensordot(np.asarray(f), self.quad_weights, axes=([axis], [0]))

    def inner(self, f: np.ndarray, g: np.ndarray) -> float:
        return float(np.sum(self.quad_weights * f * g))

    def norm(self, f: np.ndarray) -> float:
        return math.sqrt(self.inner(f, f))

    def interp(self, f: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Linear interpolation of grid function(s) to arbitrary times.

        ``f`` may be a vector of length M or an array whose last axis has
        length M; the result's last axis follows ``t``.
        """
        f = np.asarray(f, dtype=float)
        t = np.asarray(t, dtype=float)
        if f.ndim == 1:
            return np.interp(t, self.points, f)
        idx = np.clip(np.searchsorted(self.points, t, side="right") - 1, 0, self.size - 2)
        x0 = self.points[idx]
        frac = (t - x0) / (self.points[idx + 1] - x0)
        return f[..., idx] * (1.0 - frac) + f[..., idx + 1] * frac


def make_grid(domain: Sequence[float], m: int = 101) -> EvalGrid:
    """Equally spaced grid of ``m`` points with trapezoid weights.

    >>> g = make_grid((0.0, 1.0), 3)
    >>> g.points.tolist(), g.quad_weights.tolist()
    ([0.0, 0.5, 1.0], [0.25, 0.5, 0.25])
    """
    if int(m) != m or m < 2:
        raise DataError(f"grid size must be an integer >= 2, got {m}")
    a, b = float(domain[0]), float(domain[1])
    if not a < b:
        raise DataError(f"degenerate domain [{a}, {b}]")
    m = int(m)
    points = np.linspace(a, b, m)
    h = (b - a) / (m - 1)
    weights = np.full(m, h)
    weights[0] = weights[-1] = h / 2
    return EvalGrid(points, weights)


def _parse_float(text: str, lineno: int, what: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise DataError(f"line {lineno}: cannot parse {what} {text!r}") from None
    if not math.isfinite(x):
        raise DataError(f"line {lineno}: non-finite {what} {text!r}")
    return x


def load_csv(path, domain_override: Optional[Interval] = None) -> SparseDataset:
    """Read ``subject_id,time,value`` rows into a :class:`SparseDataset`.

    A header row is optional; lines starting with ``#`` and blank lines are
    skipped.  Subjects keep the order of their first appearance and their
    times are sorted.  With ``domain_override`` rows outside the interval are
    dropped and counted in ``n_dropped``.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    rows: dict = {}
    seen_data = False
    n_dropped = 0
    lo = hi = None
    if domain_override is not None:
        lo, hi = float(domain_override[0]), float(domain_override[1])
        if not lo < hi:
            raise DataError(f"degenerate domain override [{lo}, {hi}]")
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            fields = next(csv.reader([stripped]))
            if not seen_data and tuple(f.strip().lower() for f in fields) == HEADER:
                seen_data = True
                continue
            seen_data = True
            if len(fields) != 3:
                raise DataError(f"line {lineno}: expected 3 fields, got {len(fields)}")
            sid = fields[0].strip()
            if not sid:
                raise DataError(f"line {lineno}: empty subject id")
            t = _parse_float(fields[1].strip(), lineno, "time")
            y = _parse_float(fields[2].strip(), lineno, "value")
            if lo is not None and not (lo <= t <= hi):
                n_dropped += 1
                continue
            rows.setdefault(sid, []).append((t, y, lineno))
    if not rows:
        raise DataError(f"{path}: no data rows")

    subjects = []
    for sid, obs in rows.items():
        obs.sort(key=lambda r: r[0])
        times = np.array([r[0] for r in obs])
        dup = np.flatnonzero(np.diff(times) == 0)
        if dup.size:
            line = obs[dup[0] + 1][2]
            raise DataError(f"line {line}: duplicate time {times[dup[0]]!r} for subject {sid!r}")
        subjects.append(SubjectRecord(sid, times, np.array([r[1] for r in obs])))

    if domain_override is not None:
        domain = (lo, hi)
    else:
        domain = (min(s.times[0] for s in subjects), max(s.times[-1] for s in subjects))
    return SparseDataset(tuple(subjects), domain, n_dropped)


def write_csv(data: SparseDataset, path, header_comment: Optional[str] = None) -> None:
    """Write a dataset in the format read by :func:`load_csv` (round-trips exactly)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write(",".join(HEADER) + "\n")
        for s in data.subjects:
            for t, y in zip(s.times, s.values):
                fh.write(f"{s.id},{float(t)!r},{float(y)!r}\n")
