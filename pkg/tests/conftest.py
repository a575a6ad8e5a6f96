import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ltsurv.datagen import SurvivalSample
from ltsurv.simharness import run_scenario

settings.register_profile(
    "ltsurv", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("ltsurv")

_MC_CACHE = {}
ACCEPTANCE_LINES = []


def mc_summary(cfg):
    """Monte Carlo summary of a scenario, computed once per session."""
    key = cfg.config_hash()
    if key not in _MC_CACHE:
        _MC_CACHE[key] = run_scenario(cfg)
    return _MC_CACHE[key]


def random_sample(rng, n_max=20, tie_grid=None, min_n=2):
    """Small two-group dataset with both groups present; ties when ``tie_grid`` is set."""
    n = int(rng.integers(max(min_n, 2), n_max + 1))
    group = rng.permutation(np.arange(n) % 2)
    if tie_grid:
        time = rng.integers(1, tie_grid + 1, n).astype(float)
    else:
        time = rng.exponential(1.0, n)
    event = (rng.random(n) < 0.7).astype(int)
    if event.sum() == 0:
        event[0] = 1
    return SurvivalSample(time, event, group)


@pytest.fixture
def rng():
    return np.random.default_rng(20250101)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
