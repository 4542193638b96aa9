import json
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from empdyn.dataset import make_grid
from empdyn.dynamics import estimate_dynamics
from empdyn.errors import ConfigError
from empdyn.simulate import (
    TruthSpec,
    analytic_dynamics,
    analytic_r2,
    integrate_forward,
    lambda_sequence,
    sample_dataset,
    truth_eigensystem,
)

from conftest import trig_spec


def test_lambda_rules():
    np.testing.assert_allclose(lambda_sequence("k^-4", 3), [1.0, 1 / 16, 1 / 81])
    np.testing.assert_allclose(lambda_sequence("2^-k", 3), [0.5, 0.25, 0.125])
    np.testing.assert_array_equal(lambda_sequence("custom", 4, [2.0, 1.0]), [2.0, 1.0, 0.0, 0.0])
    with pytest.raises(ConfigError):
        lambda_sequence("custom", 3)
    with pytest.raises(ConfigError):
        lambda_sequence("k^-2", 3)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"lambdas": (0.5, 1.0)},
        {"lambdas": (1.0, -0.1)},
        {"lambdas": ()},
        {"lambdas": (1.0,), "sigma2": -1.0},
        {"lambdas": (1.0,), "domain": (1.0, 1.0)},
        {"lambdas": (1.0,), "sampling": {"kind": "sparse", "n_min": 0, "n_max": 3}},
        {"lambdas": (1.0,), "sampling": {"kind": "sparse", "n_min": 4, "n_max": 3}},
        {"lambdas": (1.0,), "sampling": {"kind": "sparse", "n_min": 1, "n_max": 1}},
        {"lambdas": (1.0,), "sampling": {"kind": "grid"}},
        {"lambdas": (1.0,), "mu": {"spline": [1.0]}},
        {"lambdas": (1.0,), "basis": "fourier-sine"},
        {"lambdas": (1.0,), "seed": -3},
    ],
)
def test_spec_validation(kwargs):
    with pytest.raises(ConfigError):
        TruthSpec(**kwargs)


def test_spec_json_round_trip(tmp_path):
    spec = trig_spec([1.0, 0.25], sigma2=0.01, mu={"cos": [1.0, 0.5]}, seed=9)
    path = tmp_path / "truth.json"
    path.write_text(json.dumps(spec.to_dict()))
    assert TruthSpec.from_json(path) == spec


def test_missing_spec_file_names_path(tmp_path):
    path = tmp_path / "nope.json"
    with pytest.raises(ConfigError, match="nope.json"):
        TruthSpec.from_json(path)


def test_sample_size_must_be_positive():
    with pytest.raises(ConfigError):
        sample_dataset(trig_spec([1.0]), 0)


def test_noiseless_dense_values_lie_on_paths():
    spec = trig_spec([1.0, 0.25, 0.06], mu={"cos": [1.0, 0.5]})
    data, truth = sample_dataset(spec, 20)
    for i, subj in enumerate(data.subjects):
        assert subj.id == truth.ids[i]
        np.testing.assert_array_equal(subj.values, truth.path(i, subj.times))


def test_score_variance_law_of_large_numbers():
    lams = (1.0, 0.25, 0.06)
    _, truth = sample_dataset(trig_spec(lams, sampling={"kind": "dense", "m_obs": 2}), 10000)
    np.testing.assert_allclose(truth.xi.var(axis=0), lams, rtol=0.05)


def test_seeded_sampling_is_bit_identical():
    spec = trig_spec([1.0, 0.25], sigma2=0.01, sampling={"kind": "sparse", "n_min": 2, "n_max": 8}, seed=42)
    d1, t1 = sample_dataset(spec, 50)
    d2, t2 = sample_dataset(spec, 50)
    np.testing.assert_array_equal(t1.xi, t2.xi)
    for a, b in zip(d1.subjects, d2.subjects):
        assert a.id == b.id
        assert a.times.tobytes() == b.times.tobytes()
        assert a.values.tobytes() == b.values.tobytes()
    d3, _ = sample_dataset(TruthSpec(**{**spec.to_dict(), "seed": 43}), 50)
    assert not np.array_equal(d1.subjects[0].values, d3.subjects[0].values)


def test_prefix_of_a_larger_sample_is_unchanged():
    spec = trig_spec([1.0, 0.25], sampling={"kind": "sparse", "n_min": 2, "n_max": 5}, seed=3)
    small, _ = sample_dataset(spec, 9)
    large, _ = sample_dataset(spec, 30)
    for a, b in zip(small.subjects, large.subjects):
        np.testing.assert_array_equal(a.times, b.times)


@given(st.integers(1, 6), st.integers(0, 4), st.integers(0, 2**32))
def test_sparse_design_respects_bounds(n_min, extra, seed):
    extra = max(extra, 2 - n_min)
    spec = trig_spec([1.0], sampling={"kind": "sparse", "n_min": n_min, "n_max": n_min + extra}, seed=seed)
    data, _ = sample_dataset(spec, 15)
    for subj in data.subjects:
        assert n_min <= subj.n_obs <= n_min + extra
        assert np.all(np.diff(subj.times) > 0)
        assert subj.times[0] >= 0.0 and subj.times[-1] <= 1.0


def test_analytic_r2_fixed_zeros_and_range():
    g = make_grid((0.0, 1.0), 201)
    start = time.perf_counter()
    quartic = analytic_r2("k^-4", 200, g)
    geometric = analytic_r2("2^-k", 200, g)
    assert time.perf_counter() - start < 1.0
    for r in (quartic, geometric):
        assert np.all((r >= 0) & (r <= 1))
        for t0 in (0, 100, 200):
            assert abs(r[t0]) < 1e-10
    assert np.max(np.abs(quartic - geometric)) > 0.01


def test_analytic_r2_rank_one_is_one_away_from_zeros():
    g = make_grid((0.0, 1.0), 201)
    r = analytic_r2("custom", 200, g, lambdas=[1.0])
    x = 2 * np.pi * g.points
    away = (np.abs(np.sin(x)) > 1e-3) & (np.abs(np.cos(x)) > 1e-3)
    np.testing.assert_allclose(r[away], 1.0, atol=1e-12)


def test_analytic_r2_rejects_empty_sum():
    with pytest.raises(ConfigError):
        analytic_r2("k^-4", 0)


@pytest.mark.parametrize("rule", ["k^-4", "2^-k"])
def test_analytic_r2_matches_analytic_dynamics(rule):
    g = make_grid((0.0, 1.0), 201)
    lams = lambda_sequence(rule, 40)
    spec = trig_spec(lams)
    np.testing.assert_allclose(analytic_dynamics(spec, g).R2, analytic_r2(rule, 40, g), rtol=0, atol=1e-12)


def test_analytic_dynamics_matches_dynamics_on_exact_eigensystem(quiet):
    g = make_grid((0.0, 1.0), 101)
    spec = trig_spec([1.0, 0.25, 0.06])
    ad = analytic_dynamics(spec, g)
    est = estimate_dynamics(truth_eigensystem(spec, g))
    for name in ("beta", "varX", "varDX", "covXDX", "V", "R2", "Gz"):
        np.testing.assert_allclose(getattr(est, name), getattr(ad, name), rtol=0, atol=1e-10, err_msg=name)
    np.testing.assert_allclose(est.drift_eig.lambdas, ad.drift_eig.lambdas, rtol=1e-10)


def test_analytic_dynamics_rank_one(quiet):
    g = make_grid((0.0, 1.0), 201)
    ad = analytic_dynamics(trig_spec([1.0]), g)
    x = 2 * np.pi * g.points
    away = np.abs(np.cos(x)) > 0.05
    # at the floored zeros of cos, V falls back to var X'
    assert np.max(np.abs(ad.V[away])) < 1e-10 * np.max(ad.varDX)
    np.testing.assert_allclose(ad.R2[away & (np.abs(np.sin(x)) > 0.05)], 1.0, atol=1e-10)


def test_decomposition_identity_in_oracle():
    g = make_grid((0.0, 1.0), 101)
    ad = analytic_dynamics(trig_spec([1.0, 0.25, 0.06]), g)
    np.testing.assert_allclose(ad.varDX, ad.beta**2 * ad.varX + ad.V, rtol=0, atol=1e-10)
    np.testing.assert_allclose(np.diag(ad.Gz), ad.V, rtol=0, atol=1e-10)


def test_exact_beta_matches_grid_oracle():
    g = make_grid((0.0, 1.0), 101)
    spec = trig_spec([1.0, 0.25, 0.06])
    np.testing.assert_allclose(spec.beta(g.points), analytic_dynamics(spec, g).beta, rtol=0, atol=1e-12)


def test_integrate_pure_mean_motion():
    g = make_grid((0.0, 1.0), 51)
    mu = np.sin(3 * g.points) + g.points**2
    x = integrate_forward(0.7, np.zeros(g.size), np.zeros(g.size), mu, g)
    np.testing.assert_allclose(x, 0.7 + mu - mu[0], rtol=0, atol=1e-8)


@pytest.mark.parametrize("b", [-2.0, 0.5, 3.0])
def test_integrate_constant_coefficient(b):
    g = make_grid((0.0, 1.0), 101)
    x = integrate_forward(1.3, np.full(g.size, b), np.zeros(g.size), np.zeros(g.size), g)
    np.testing.assert_allclose(x, 1.3 * np.exp(b * g.points), rtol=1e-8)


def test_integrate_shifted_domain():
    g = make_grid((2.0, 5.0), 61)
    x = integrate_forward(2.0, lambda t: -0.4 + 0 * t, lambda t: 0 * t, lambda t: 0 * t, g)
    np.testing.assert_allclose(x, 2.0 * np.exp(-0.4 * (g.points - 2.0)), rtol=1e-8)


def _round_trip_errors(i, steps):
    spec = trig_spec([1.0, 0.25, 0.06], mu={"poly": [0.5, 1.0, -0.3]}, seed=4)
    _, truth = sample_dataset(spec, 5)
    g = make_grid((0.0, 1.0), 101)

    def z(t):
        return truth.dpath(i, t) - spec.dmean(t) - spec.beta(t) * (truth.path(i, t) - spec.mean(t))

    x = truth.path(i, g.points)
    return [np.max(np.abs(integrate_forward(x[0], spec.beta, z, spec.mean, g, s) - x)) for s in steps]


@pytest.mark.parametrize("i", range(3))
def test_round_trip_recovers_path(i):
    (err,) = _round_trip_errors(i, [10])
    assert err < 1e-6


@pytest.mark.parametrize("i", range(3))
def test_integrator_is_fourth_order(i):
    e5, e10, e20 = _round_trip_errors(i, [5, 10, 20])
    assert e5 / e10 >= 8 and e10 / e20 >= 8


def test_grid_inputs_are_linearly_interpolated():
    # a kink between grid points is invisible to a grid-function input
    g = make_grid((0.0, 1.0), 11)
    z = np.where(np.arange(g.size) % 2 == 0, 0.0, 1.0)
    x = integrate_forward(0.0, np.zeros(g.size), z, np.zeros(g.size), g, steps_per_cell=50)
    np.testing.assert_allclose(x[2], 0.1, atol=1e-12)


def test_integrate_rejects_bad_steps():
    g = make_grid((0.0, 1.0), 11)
    with pytest.raises(ConfigError):
        integrate_forward(0.0, np.zeros(11), np.zeros(11), np.zeros(11), g, steps_per_cell=0)
