import json
import subprocess
import sys

import numpy as np
import pytest

from empdyn import __version__
from empdyn.cli import main
from empdyn.dataset import SparseDataset, SubjectRecord, load_csv, write_csv
from empdyn.io import read_table
from empdyn.simulate import TruthSpec

FIXED = "0.08,0.12,0.1,0.15"


def _spec_file(tmp_path, **kw):
    spec = {
        "lambdas": [1.0, 0.25, 0.06],
        "mu": {"poly": [0.5, 1.0]},
        "sigma2": 0.01,
        "sampling": {"kind": "sparse", "n_min": 3, "n_max": 8},
        "seed": 3,
    }
    spec.update(kw)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec))
    return path


def _run_all(out, spec, n=80, bandwidths=FIXED):
    assert main(["simulate", "--spec", str(spec), "--n", str(n), "--seed", "7", "--output-dir", str(out)]) == 0
    data = str(out / "data.csv")
    assert main(["fit", "--input", data, "--bandwidths", bandwidths, "--output-dir", str(out), "--grid-size", "51"]) == 0
    assert main(["dynamics", "--output-dir", str(out)]) == 0
    assert main(["pace", "--input", data, "--output-dir", str(out)]) == 0
    assert main(["report", "--output-dir", str(out)]) == 0


def _files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_simulate_is_deterministic(tmp_path):
    spec = _spec_file(tmp_path)
    for name in ("a", "b"):
        assert main(["simulate", "--spec", str(spec), "--n", "40", "--seed", "7", "--output-dir", str(tmp_path / name)]) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    data = load_csv(tmp_path / "a" / "data.csv")
    assert data.n_subjects == 40
    truth = json.loads((tmp_path / "a" / "truth.json").read_text())
    assert truth["meta"]["seed"] == 7 and truth["spec"]["seed"] == 7
    assert np.array(truth["xi"]).shape == (40, 3)


def test_simulate_seed_changes_data(tmp_path):
    spec = _spec_file(tmp_path)
    for name, seed in (("a", "1"), ("b", "2")):
        main(["simulate", "--spec", str(spec), "--n", "10", "--seed", seed, "--output-dir", str(tmp_path / name)])
    assert (tmp_path / "a" / "data.csv").read_bytes() != (tmp_path / "b" / "data.csv").read_bytes()


def test_missing_spec_names_path(tmp_path, capsys):
    missing = tmp_path / "fig1_k4.json"
    assert main(["simulate", "--spec", str(missing), "--n", "5", "--output-dir", str(tmp_path)]) == 2
    assert "fig1_k4.json" in capsys.readouterr().err


@pytest.mark.parametrize("n", ["0", "-4"])
def test_nonpositive_subject_count_is_config_error(tmp_path, n):
    spec = _spec_file(tmp_path)
    assert main(["simulate", "--spec", str(spec), "--n", n, "--output-dir", str(tmp_path)]) == 2


def test_config_file_and_flag_precedence(tmp_path):
    spec = _spec_file(tmp_path)
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"spec": str(spec), "n": 12, "output_dir": str(tmp_path / "out")}))
    assert main(["simulate", "--config", str(cfg)]) == 0
    assert load_csv(tmp_path / "out" / "data.csv").n_subjects == 12
    assert main(["simulate", "--config", str(cfg), "--n", "5"]) == 0
    assert load_csv(tmp_path / "out" / "data.csv").n_subjects == 5
    cfg.write_text(json.dumps({"spec": str(spec), "n": 3, "bogus": 1}))
    assert main(["simulate", "--config", str(cfg), "--output-dir", str(tmp_path)]) == 2


@pytest.mark.parametrize(
    "extra",
    [
        ["--bandwidths", "0.1,0.2"],
        ["--bandwidths", "0.1,0.2,x,0.3"],
        ["--bandwidths", "0.1,0.2,5.0,0.3"],
        ["--domain", "1,0"],
        ["--grid-size", "1"],
        ["--kmax", "0"],
    ],
)
def test_fit_option_errors(tmp_path, extra):
    spec = _spec_file(tmp_path)
    main(["simulate", "--spec", str(spec), "--n", "20", "--output-dir", str(tmp_path)])
    assert main(["fit", "--input", str(tmp_path / "data.csv"), "--output-dir", str(tmp_path), *extra]) == 2


def test_fit_missing_input(tmp_path, capsys):
    assert main(["fit", "--input", str(tmp_path / "none.csv"), "--output-dir", str(tmp_path)]) == 2
    assert "none.csv" in capsys.readouterr().err


def test_full_pipeline_outputs(tmp_path):
    out = tmp_path / "run"
    _run_all(out, _spec_file(tmp_path))
    for name in ("moments.csv", "G.csv", "dG.csv", "eigensystem.csv", "dynamics.csv", "gz.csv", "drift_eig.csv"):
        assert (out / name).exists(), name
    for name in ("summary.json", "dynamics_summary.json", "subdomains.json", "scores.json", "extremes.json", "report.json"):
        doc = json.loads((out / name).read_text(encoding="utf-8"))
        assert doc["meta"]["version"] == __version__
    summary = json.loads((out / "summary.json").read_text())
    assert summary["K"] == len(summary["lambdas"]) >= 1
    assert set(summary["bandwidths"]) >= {"h_mu0", "h_mu1", "h_G0", "h_G1"}
    assert summary["sigma2"] >= 0
    assert len(list((out / "subjects").glob("*.csv"))) == 80
    extremes = json.loads((out / "extremes.json").read_text())["components"]
    assert all(len(c["subjects"]) == 3 for c in extremes)
    report = json.loads((out / "report.json").read_text())
    assert {"summary", "dynamics_summary", "subdomains", "scores", "extremes"} <= set(report)


def test_every_csv_has_provenance_header(tmp_path):
    out = tmp_path / "run"
    _run_all(out, _spec_file(tmp_path), n=30)
    config_hashes = set()
    for path in out.rglob("*.csv"):
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0].startswith(f"# empdyn {__version__} config=")
        assert "seed=7" in lines[0], path
        config_hashes.add(lines[0].split()[3])
        assert not lines[1].startswith("#")
    # simulate, fit, dynamics and pace each hash their own configuration
    assert len(config_hashes) == 4


def test_rerun_is_byte_identical(tmp_path):
    spec = _spec_file(tmp_path)
    _run_all(tmp_path / "a", spec, n=60, bandwidths="auto")
    _run_all(tmp_path / "b", spec, n=60, bandwidths="auto")
    first, second = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert first.keys() == second.keys()
    for name in first:
        assert first[name] == second[name], name
    # rerunning a stage in place rewrites the same bytes
    assert main(["dynamics", "--output-dir", str(tmp_path / "a")]) == 0
    assert _files(tmp_path / "a") == first


def test_dynamics_csv_satisfies_decomposition(tmp_path):
    out = tmp_path / "run"
    _run_all(out, _spec_file(tmp_path), n=60)
    header, arr = read_table(out / "dynamics.csv")
    assert header == ["t", "beta", "varX", "varDX", "V", "R2"]
    col = dict(zip(header, arr.T))
    resid = col["varDX"] - col["beta"] ** 2 * col["varX"] - col["V"]
    assert np.max(np.abs(resid)) <= 1e-10
    assert np.all((col["R2"] >= 0) & (col["R2"] <= 1))


def test_subdomain_thresholds(tmp_path):
    out = tmp_path / "run"
    _run_all(out, _spec_file(tmp_path), n=40)
    assert main(["dynamics", "--output-dir", str(out), "--r2-threshold", "0.5,0.95"]) == 0
    doc = json.loads((out / "subdomains.json").read_text())
    assert set(doc["thresholds"]) == {"0.5", "0.95"}
    assert main(["dynamics", "--output-dir", str(out), "--r2-threshold", "1.5"]) == 2


def test_dynamics_without_fit_is_config_error(tmp_path):
    assert main(["dynamics", "--output-dir", str(tmp_path)]) == 2


def test_single_subject_falls_back_with_warning(tmp_path):
    t = np.linspace(0, 1, 15)
    data = SparseDataset((SubjectRecord("only", t, np.sin(3 * t)),), (0.0, 1.0))
    write_csv(data, tmp_path / "one.csv")
    assert main(["fit", "--input", str(tmp_path / "one.csv"), "--output-dir", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert any("cross-validation skipped" in w for w in summary["warnings"])
    assert summary["bandwidths"]["h_mu0"] == pytest.approx(0.1)


def test_log_values(tmp_path):
    t = np.linspace(0, 1, 6)
    subs = tuple(SubjectRecord(f"s{i}", t, np.exp(0.1 * i + t)) for i in range(25))
    write_csv(SparseDataset(subs, (0.0, 1.0)), tmp_path / "pos.csv")
    args = ["fit", "--input", str(tmp_path / "pos.csv"), "--bandwidths", FIXED, "--output-dir", str(tmp_path)]
    assert main(args + ["--log-values"]) == 0
    _, mom = read_table(tmp_path / "moments.csv")
    np.testing.assert_allclose(mom[:, 1], 0.1 * 12 + mom[:, 0], atol=1e-8)
    neg = SparseDataset((SubjectRecord("z", t, t - 0.5),) + subs[1:], (0.0, 1.0))
    write_csv(neg, tmp_path / "neg.csv")
    args[2] = str(tmp_path / "neg.csv")
    assert main(args + ["--log-values"]) == 2


def test_domain_restriction_recorded(tmp_path):
    spec = _spec_file(tmp_path)
    main(["simulate", "--spec", str(spec), "--n", "60", "--output-dir", str(tmp_path)])
    args = ["fit", "--input", str(tmp_path / "data.csv"), "--bandwidths", "0.05,0.08,0.06,0.09"]
    assert main(args + ["--domain", "0.2,0.8", "--output-dir", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["domain"] == [0.2, 0.8] and summary["n_dropped"] > 0
    assert main(["dynamics", "--output-dir", str(tmp_path)]) == 0
    assert main(["pace", "--input", str(tmp_path / "data.csv"), "--output-dir", str(tmp_path)]) == 0


def test_centered_subject_gets_zero_drift(tmp_path):
    out = tmp_path / "run"
    _run_all(out, _spec_file(tmp_path), n=60)
    _, mom = read_table(out / "moments.csv")
    times = mom[::10, 0]
    write_csv(SparseDataset((SubjectRecord("flat", times, mom[::10, 1]),), (0.0, 1.0)), tmp_path / "flat.csv")
    assert main(["pace", "--input", str(tmp_path / "flat.csv"), "--output-dir", str(out)]) == 0
    lines = (out / "subjects" / "flat.csv").read_text().splitlines()[2:]
    zhat = np.array([float(line.split(",")[4]) for line in lines])
    assert np.max(np.abs(zhat)) == 0.0


def test_unsafe_subject_ids_get_safe_file_names(tmp_path):
    out = tmp_path / "run"
    _run_all(out, _spec_file(tmp_path), n=40)
    t = np.linspace(0.05, 0.95, 5)
    subs = (SubjectRecord("a/b", t, t), SubjectRecord("a_b", t, t), SubjectRecord("..", t, -t))
    write_csv(SparseDataset(subs, (0.0, 1.0)), tmp_path / "odd.csv")
    assert main(["pace", "--input", str(tmp_path / "odd.csv"), "--output-dir", str(out)]) == 0
    names = sorted(p.name for p in (out / "subjects").glob("a*.csv"))
    assert "a_b.csv" in names and "a_b__2.csv" in names
    assert not (tmp_path / "run" / "a").exists()


def test_all_subjects_failing_exits_3(tmp_path, capsys):
    out = tmp_path / "run"
    _run_all(out, _spec_file(tmp_path), n=80)
    summary_path = out / "summary.json"
    summary = json.loads(summary_path.read_text())
    assert summary["K"] >= 2
    summary["sigma2"] = 0.0
    summary_path.write_text(json.dumps(summary))
    # two numerically coincident times give identical rows in the design matrix
    subj = SubjectRecord("twin", np.array([0.4, 0.4 + 1e-14]), np.array([1.0, 1.0]))
    write_csv(SparseDataset((subj,), (0.0, 1.0)), tmp_path / "twin.csv")
    args = ["pace", "--input", str(tmp_path / "twin.csv"), "--output-dir", str(out)]
    assert main(args + ["--no-sigma-floor"]) == 3
    assert "twin" in capsys.readouterr().err
    assert main(args) == 0


def test_planted_drift_subject_tops_extremes(tmp_path):
    spec = TruthSpec(lambdas=(1.0, 0.5), mu={"poly": [0.5, 1.0]}, sigma2=0.01, sampling={"kind": "dense", "m_obs": 21}, seed=2)
    from test_pace import _with_planted
    from empdyn.dataset import make_grid

    data, planted = _with_planted(spec, make_grid((0.0, 1.0), 51), 200, 2)
    write_csv(data, tmp_path / "planted.csv")
    out = str(tmp_path)
    args = ["--input", str(tmp_path / "planted.csv"), "--output-dir", out]
    assert main(["fit", *args, "--grid-size", "51", "--bandwidths", "0.06,0.09,0.08,0.12"]) == 0
    assert main(["dynamics", "--output-dir", out]) == 0
    assert main(["pace", *args]) == 0
    first = json.loads((tmp_path / "extremes.json").read_text())["components"][0]
    assert first["subjects"][0]["id"] == planted


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "empdyn.cli", "simulate", "--spec", str(tmp_path / "x.json"), "--n", "3"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 2
    assert "x.json" in proc.stderr
