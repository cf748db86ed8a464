import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from adaptive_platoon.config import ExperimentConfig
from adaptive_platoon.geometry import ConflictMatrix, build_layout

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def layout():
    return build_layout()


@pytest.fixture(scope="session")
def cm(layout):
    return ConflictMatrix.from_layout(layout)


@pytest.fixture
def empty_config():
    return ExperimentConfig(flows={k: 0.0 for k in ExperimentConfig().flows}, horizon=60.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
