"""Command line interface: ``empdyn simulate|fit|dynamics|pace|report``.

Stages hand off through files in an output directory::

    empdyn simulate --spec truth.json --n 400 --output-dir run
    empdyn fit --input run/data.csv --output-dir run
    empdyn dynamics --output-dir run
    empdyn pace --input run/data.csv --output-dir run
    empdyn report --output-dir run

Exit codes: 0 success, 2 configuration or input error, 3 estimation failure.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
import warnings
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import io
from .dataset import SparseDataset, load_csv, make_grid, write_csv
from .dynamics import FLOOR_FRAC, estimate_dynamics, subdomain_report
from .eigenbasis import EigenSystem, TruncationRule
from .errors import ConfigError, DataError, EstimationError, EstimationWarning
from .pace import drift_score_extremes, effective_sigma2, fit_all
from .pipeline import fit as run_fit
from .simulate import TruthSpec, sample_dataset
from .smoothing import KERNEL_FAMILIES, KernelSpec, MomentEstimates, SmoothConfig

logger = logging.getLogger("empdyn")

EXIT_OK, EXIT_CONFIG, EXIT_ESTIMATION = 0, 2, 3

DEFAULTS = {
    "grid_size": 101,
    "bandwidths": "auto",
    "kernel": "epanechnikov",
    "fve": 0.95,
    "kmax": 20,
    "r2_threshold": "0.8,0.9",
    "log_values": False,
    "domain": None,
    "seed": None,
    "top": 3,
    "no_sigma_floor": False,
}


# ---------------------------------------------------------------------------
# option parsing helpers


def _float_list(text, n: Optional[int], what: str) -> List[float]:
    if isinstance(text, (list, tuple)):
        parts = list(text)
    else:
        parts = str(text).split(",")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise ConfigError(f"{what}: expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"{what}: expected {n} values, got {len(vals)}")
    if not all(np.isfinite(vals)):
        raise ConfigError(f"{what}: values must be finite")
    return vals


def _bandwidths(text, kernel: KernelSpec):
    if text in (None, "auto"):
        return "auto"
    h = _float_list(text, 4, "--bandwidths")
    return SmoothConfig(*h, kernel=kernel, bandwidth_mode="fixed")


def _domain(text):
    if text is None:
        return None
    lo, hi = _float_list(text, 2, "--domain")
    if not lo < hi:
        raise ConfigError(f"--domain: need a < b, got [{lo}, {hi}]")
    return (lo, hi)


def _thresholds(text) -> List[float]:
    vals = _float_list(text, None, "--r2-threshold")
    for v in vals:
        if not 0 < v <= 1:
            raise ConfigError(f"--r2-threshold values must lie in (0, 1], got {v}")
    return vals


def _positive_int(value, what: str) -> int:
    try:
        v = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be an integer, got {value!r}") from None
    if v != value and not isinstance(value, str):
        raise ConfigError(f"{what} must be an integer, got {value!r}")
    if v < 1:
        raise ConfigError(f"{what} must be positive, got {v}")
    return v


def _resolve(args: argparse.Namespace) -> dict:
    """Merge command-line flags over ``--config`` values over defaults."""
    opts = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg = io.read_json(args.config)
        if not isinstance(cfg, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
        for key, val in cfg.items():
            key = key.replace("-", "_")
            if key not in vars(args):
                raise ConfigError(f"{args.config}: unknown option {key!r} for this command")
            opts[key] = val
    for key, val in vars(args).items():
        if val is not None and key not in ("command", "config", "func", "verbose"):
            if isinstance(val, bool) and not val and key in opts:
                continue
            opts[key] = val
    return opts


def _output_dir(opts) -> Path:
    if not opts.get("output_dir"):
        raise ConfigError("--output-dir is required")
    out = Path(opts["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(path, log_values: bool, domain) -> SparseDataset:
    if not path:
        raise ConfigError("--input is required")
    if not Path(path).exists():
        raise ConfigError(f"input file not found: {path}")
    data = load_csv(path, domain)
    if data.n_dropped:
        logger.info("dropped %d rows outside the domain", data.n_dropped)
    if log_values:
        bad = [s.id for s in data.subjects if np.any(s.values <= 0)]
        if bad:
            raise DataError(f"--log-values needs positive values; subject {bad[0]!r} has some <= 0")
        data = data.map_values(np.log)
    return data


def _input_seed(path) -> Optional[int]:
    """Seed from a provenance comment on the first line of an input CSV, if any."""
    with Path(path).open(encoding="utf-8") as fh:
        first = fh.readline()
    m = re.search(r"\bseed=(\d+)\b", first) if first.startswith("#") else None
    return int(m.group(1)) if m else None


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(opts) -> int:
    if not opts.get("spec"):
        raise ConfigError("--spec is required")
    spec = TruthSpec.from_json(opts["spec"])
    if opts.get("seed") is not None:
        spec = TruthSpec.from_dict({**spec.to_dict(), "seed": int(opts["seed"])})
    n = _positive_int(opts.get("n"), "--n")
    out = _output_dir(opts)
    meta = io.provenance(io.config_hash({"command": "simulate", "spec": spec.to_dict(), "n": n}), spec.seed)
    data, truth = sample_dataset(spec, n)
    write_csv(data, out / "data.csv", io.header_line(meta))
    io.write_json(out / "truth.json", truth.to_dict(), meta)
    logger.info("wrote %d subjects to %s", n, out / "data.csv")
    return EXIT_OK


def cmd_fit(opts) -> int:
    kernel = KernelSpec(opts["kernel"])
    bandwidths = _bandwidths(opts["bandwidths"], kernel)
    domain = _domain(opts["domain"])
    m = _positive_int(opts["grid_size"], "--grid-size")
    if m < 2:
        raise ConfigError("--grid-size must be at least 2")
    selector = TruncationRule(float(opts["fve"]), _positive_int(opts["kmax"], "--kmax"))
    data = _load_data(opts.get("input"), bool(opts["log_values"]), domain)
    out = _output_dir(opts)
    if isinstance(bandwidths, SmoothConfig):
        bandwidths.check_domain(data.domain)

    data_opts = {"log_values": bool(opts["log_values"]), "domain": list(domain) if domain else None}
    config = {
        "command": "fit",
        "input_sha256": io.file_sha256(opts["input"]),
        "grid_size": m,
        "bandwidths": opts["bandwidths"] if bandwidths == "auto" else bandwidths.as_dict(),
        "kernel": kernel.family,
        "fve": selector.fve,
        "kmax": selector.k_max,
        **data_opts,
    }
    seed = opts.get("seed")
    meta = io.provenance(io.config_hash(config), _input_seed(opts["input"]) if seed is None else seed)

    grid = make_grid(data.domain, m)
    res = run_fit(data, grid, bandwidths, selector, kernel)
    mom, eig = res.moments, res.eig
    t = grid.points
    io.write_columns(out / "moments.csv", {"t": t, "mu": mom.mu, "dmu": mom.dmu}, meta)
    io.write_matrix(out / "G.csv", t, mom.G, meta)
    io.write_matrix(out / "dG.csv", t, mom.dG, meta)
    cols = {"t": t}
    cols.update({f"phi_{k + 1}": eig.phis[k] for k in range(eig.K)})
    cols.update({f"dphi_{k + 1}": eig.dphis[k] for k in range(eig.K)})
    io.write_columns(out / "eigensystem.csv", cols, meta)
    summary = {
        "config": config,
        "n_subjects": data.n_subjects,
        "n_observations": int(sum(s.n_obs for s in data.subjects)),
        "n_dropped": data.n_dropped,
        "domain": list(data.domain),
        "grid_size": m,
        "bandwidths": mom.config.as_dict(),
        "sigma2": mom.sigma2,
        "K": eig.K,
        "lambdas": eig.lambdas.tolist(),
        "fve": eig.fve.tolist(),
        "positive_lambdas": eig.all_lambdas.tolist(),
        "spacings": eig.spacings().tolist(),
        "warnings": res.warnings,
    }
    io.write_json(out / "summary.json", summary, meta)
    logger.info("K=%d, sigma2=%.4g, bandwidths %s", eig.K, mom.sigma2, mom.config.as_dict())
    return EXIT_OK


def _load_fit(fit_dir: Path):
    summary = io.read_json(fit_dir / "summary.json")
    grid = make_grid(tuple(summary["domain"]), int(summary["grid_size"]))
    header, mcols = io.read_table(fit_dir / "moments.csv")
    if not np.array_equal(mcols[:, 0], grid.points):
        raise ConfigError(f"{fit_dir / 'moments.csv'}: grid does not match summary.json")
    _, G = io.read_matrix(fit_dir / "G.csv")
    _, dG = io.read_matrix(fit_dir / "dG.csv")
    bw = summary["bandwidths"]
    cfg = SmoothConfig(
        bw["h_mu0"], bw["h_mu1"], bw["h_G0"], bw["h_G1"], KernelSpec(bw["kernel"]), bw["bandwidth_mode"]
    )
    moments = MomentEstimates(grid, mcols[:, 1], mcols[:, 2], G, dG, float(summary["sigma2"]), cfg)
    _, ecols = io.read_table(fit_dir / "eigensystem.csv")
    K = int(summary["K"])
    eig = EigenSystem(
        grid,
        np.array(summary["lambdas"]),
        ecols[:, 1 : 1 + K].T.copy(),
        np.array(summary["fve"]),
        ecols[:, 1 + K : 1 + 2 * K].T.copy(),
        np.array(summary["positive_lambdas"]),
    )
    return summary, moments, eig


def _fit_dir(opts, out: Path) -> Path:
    return Path(opts["fit_dir"]) if opts.get("fit_dir") else out


def _compute_dynamics(opts, out: Path):
    summary, moments, eig = _load_fit(_fit_dir(opts, out))
    selector = TruncationRule(float(opts["fve"]), _positive_int(opts["kmax"], "--kmax"))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EstimationWarning)
        dyn = estimate_dynamics(eig, selector, FLOOR_FRAC)
    msgs = []
    for w in caught:
        if str(w.message) not in msgs:
            msgs.append(str(w.message))
    return summary, moments, eig, dyn, selector, msgs


def cmd_dynamics(opts) -> int:
    out = _output_dir(opts)
    thresholds = _thresholds(opts["r2_threshold"])
    summary, moments, eig, dyn, selector, msgs = _compute_dynamics(opts, out)
    config = {
        "command": "dynamics",
        "fit_config_hash": summary["meta"]["config_hash"],
        "r2_thresholds": thresholds,
        "fve": selector.fve,
        "kmax": selector.k_max,
    }
    meta = io.provenance(io.config_hash(config), summary["meta"].get("seed"))
    t = dyn.grid.points
    io.write_columns(
        out / "dynamics.csv",
        {"t": t, "beta": dyn.beta, "varX": dyn.varX, "varDX": dyn.varDX, "V": dyn.V, "R2": dyn.R2},
        meta,
    )
    io.write_matrix(out / "gz.csv", t, dyn.Gz, meta)
    cols = {"t": t}
    if dyn.drift_eig is not None:
        cols.update({f"psi_{k + 1}": dyn.drift_eig.phis[k] for k in range(dyn.drift_eig.K)})
    io.write_columns(out / "drift_eig.csv", cols, meta)
    reports = {str(th): subdomain_report(dyn, th) for th in thresholds}
    io.write_json(out / "subdomains.json", {"thresholds": reports}, meta)
    drift = dyn.drift_eig
    payload = {
        "config": config,
        "K": eig.K,
        "fve": eig.fve.tolist(),
        "floor_counts": dyn.floor_counts,
        "drift_K": 0 if drift is None else drift.K,
        "drift_rho": [] if drift is None else drift.lambdas.tolist(),
        "drift_fve": [] if drift is None else drift.fve.tolist(),
        "integrated_V": float(dyn.grid.integrate(dyn.V)),
        "integrated_varDX": float(dyn.grid.integrate(dyn.varDX)),
        "max_identity_residual": float(np.max(np.abs(dyn.varDX - dyn.beta**2 * dyn.varX - dyn.V))),
        "subdomains": reports,
        "warnings": msgs,
    }
    io.write_json(out / "dynamics_summary.json", payload, meta)
    return EXIT_OK


_SAFE_ID = re.compile(r"^[A-Za-z0-9._-]+$")


def _file_stem(sid: str, used: set) -> str:
    stem = sid if _SAFE_ID.match(sid) and sid not in (".", "..") else re.sub(r"[^A-Za-z0-9._-]", "_", sid)
    base, i = stem, 1
    while stem in used:
        i += 1
        stem = f"{base}__{i}"
    used.add(stem)
    return stem


def cmd_pace(opts) -> int:
    out = _output_dir(opts)
    top = _positive_int(opts["top"], "--top")
    summary, moments, eig, dyn, selector, _ = _compute_dynamics(opts, out)
    data_opts = summary["config"]
    domain = tuple(data_opts["domain"]) if data_opts.get("domain") else None
    data = _load_data(opts.get("input"), bool(data_opts.get("log_values")), domain)
    use_floor = not bool(opts["no_sigma_floor"])
    config = {
        "command": "pace",
        "fit_config_hash": summary["meta"]["config_hash"],
        "input_sha256": io.file_sha256(opts["input"]),
        "sigma_floor": use_floor,
        "top": top,
        "fve": selector.fve,
        "kmax": selector.k_max,
    }
    meta = io.provenance(io.config_hash(config), summary["meta"].get("seed"))
    fits, failures = fit_all(data, moments, eig, dyn, use_floor)
    sub = out / "subjects"
    sub.mkdir(exist_ok=True)
    used: set = set()
    t = moments.grid.points
    for f in fits:
        stem = _file_stem(f.id, used)
        rows = ([f.id, ti, x, dx, z] for ti, x, dx, z in zip(t, f.xhat, f.dxhat, f.zhat))
        io.write_table(sub / f"{stem}.csv", ["subject_id", "t", "xhat", "dxhat", "zhat"], rows, meta)
    io.write_json(
        out / "scores.json",
        {
            "config": config,
            "K": eig.K,
            "sigma2_used": effective_sigma2(moments, use_floor),
            "subjects": [{"id": f.id, "scores": f.scores.tolist()} for f in fits],
            "failures": [{"id": sid, "error": msg} for sid, msg in failures],
        },
        meta,
    )
    io.write_json(out / "extremes.json", {"components": drift_score_extremes(fits, dyn.drift_eig, top)}, meta)
    if failures:
        logger.warning("PACE failed for %d of %d subjects", len(failures), data.n_subjects)
    return EXIT_OK


REPORT_PARTS = ("summary.json", "dynamics_summary.json", "subdomains.json", "scores.json", "extremes.json")


def cmd_report(opts) -> int:
    out = _output_dir(opts)
    if not (out / "summary.json").exists():
        raise ConfigError(f"{out}: no summary.json; run 'fit' first")
    parts = {}
    for name in REPORT_PARTS:
        if (out / name).exists():
            parts[name[: -len(".json")]] = io.read_json(out / name)
    fit_meta = parts["summary"]["meta"]
    meta = io.provenance(io.config_hash({"command": "report", "parts": sorted(parts)}), fit_meta.get("seed"))
    io.write_json(out / "report.json", parts, meta)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="empdyn", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, output=True):
        sp.add_argument("--config", help="JSON file of option values (flags override)")
        if output:
            sp.add_argument("--output-dir", help="directory for outputs (and stage inputs)")
        sp.add_argument("--seed", type=int, help="seed recorded in provenance (simulate: overrides the spec)")

    s = sub.add_parser("simulate", help="sample a dataset from a truth spec")
    common(s)
    s.add_argument("--spec", help="TruthSpec JSON file")
    s.add_argument("--n", type=int, help="number of subjects")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="smooth moments and decompose the covariance")
    common(f)
    f.add_argument("--input", help="CSV of subject_id,time,value")
    f.add_argument("--grid-size", type=int, help="evaluation grid size M (default 101)")
    f.add_argument("--bandwidths", help="'auto' or h_mu0,h_mu1,h_G0,h_G1")
    f.add_argument("--kernel", choices=KERNEL_FAMILIES)
    f.add_argument("--fve", type=float, help="FVE threshold (default 0.95)")
    f.add_argument("--kmax", type=int, help="maximum number of components (default 20)")
    f.add_argument("--log-values", action="store_true", default=None, help="log-transform values on input")
    f.add_argument("--domain", help="a,b: restrict to this time interval")
    f.set_defaults(func=cmd_fit)

    d = sub.add_parser("dynamics", help="beta, V, R2, drift covariance and its eigenfunctions")
    common(d)
    d.add_argument("--fit-dir", help="directory with fit outputs (default: output dir)")
    d.add_argument("--r2-threshold", help="comma-separated R2 thresholds (default 0.8,0.9)")
    d.add_argument("--fve", type=float, help="FVE threshold for drift components")
    d.add_argument("--kmax", type=int, help="maximum number of drift components")
    d.set_defaults(func=cmd_dynamics)

    c = sub.add_parser("pace", help="per-subject trajectories, derivatives and drift paths")
    common(c)
    c.add_argument("--input", help="the CSV used for fit")
    c.add_argument("--fit-dir", help="directory with fit outputs (default: output dir)")
    c.add_argument("--top", type=int, help="subjects listed per drift component (default 3)")
    c.add_argument("--no-sigma-floor", action="store_true", default=None, help="do not floor a zero sigma2")
    c.add_argument("--fve", type=float, help="FVE threshold for drift components")
    c.add_argument("--kmax", type=int, help="maximum number of drift components")
    c.set_defaults(func=cmd_pace)

    r = sub.add_parser("report", help="bundle all summaries into report.json")
    common(r)
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EstimationWarning)  # already logged by the modules
        try:
            return args.func(_resolve(args))
        except (ConfigError, DataError) as exc:
            print(f"empdyn {args.command}: error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except EstimationError as exc:
            print(f"empdyn {args.command}: estimation failed: {exc}", file=sys.stderr)
            return EXIT_ESTIMATION


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
