import sys
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from empdyn.dataset import make_grid
from empdyn.errors import EstimationWarning
from empdyn.simulate import TruthSpec

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def grid():
    return make_grid((0.0, 1.0), 101)


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EstimationWarning)
        yield


def trig_spec(lambdas, sigma2=0.0, sampling=None, seed=1, mu=None):
    return TruthSpec(
        lambdas=tuple(lambdas),
        mu=mu or {"poly": [0.5, 1.0]},
        sigma2=sigma2,
        sampling=sampling or {"kind": "dense", "m_obs": 51},
        seed=seed,
    )


def trig_phi(k, t):
    return np.sqrt(2.0) * np.cos(2 * k * np.pi * t)


def trig_dphi(k, t):
    return -2.0 * np.sqrt(2.0) * k * np.pi * np.sin(2 * k * np.pi * t)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for num in sorted(results):
            terminalreporter.write_line(results[num])
