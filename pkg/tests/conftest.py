import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dyadic_t1.grid import DyadicCube, HaarIndex

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def D(level, *index):
    return DyadicCube(level, tuple(index))


def H(level, *index, eta=None):
    return HaarIndex(D(level, *index), eta)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
