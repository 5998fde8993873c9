import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fbsde_lab.core import build_grid, sample_brownian

settings.register_profile("lab", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lab")


@pytest.fixture
def grid():
    return build_grid(0.0, 1.0, 50)


@pytest.fixture
def driver(grid):
    return sample_brownian(grid, 2000, seed=123)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
