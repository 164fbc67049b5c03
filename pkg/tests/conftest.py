import warnings

import numpy as np
import pytest

from adweight.simulation import DgpConfig, dgp_spec, mask_trials, simulate_dgp


@pytest.fixture(scope="session")
def spec():
    return dgp_spec()


@pytest.fixture(scope="session")
def dgp_trials():
    """Five trials from the simulation design at n=15000, fixed seed."""
    return simulate_dgp(DgpConfig(n=15000, seed=11))


@pytest.fixture(scope="session")
def small_trials():
    return simulate_dgp(DgpConfig(n=5000, seed=5))


@pytest.fixture(scope="session")
def masked(dgp_trials):
    return mask_trials(dgp_trials, (1, 2, 3))


@pytest.fixture(autouse=True)
def _quiet_overlap():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


def rng(seed=0):
    return np.random.default_rng(seed)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.VERDICTS):
        terminalreporter.write_line(mod.VERDICTS[k])
