import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("calsal", deadline=None, max_examples=25, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("calsal")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_cnn():
    """A briefly trained default-architecture CNN on 16x16 synthetic shapes (float32)."""
    from helpers import train_toy_cnn
    return train_toy_cnn()


@pytest.fixture(scope="session")
def square_detector():
    from helpers import train_square_detector
    return train_square_detector()


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(LINES):
            terminalreporter.write_line(line)
