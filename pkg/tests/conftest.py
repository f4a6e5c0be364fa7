import numpy as np
import pytest
from hypothesis import settings

from robustglmm.experiments import SimConfig, simulate

settings.register_profile("default", deadline=None, max_examples=30)
settings.load_profile("default")


@pytest.fixture(scope="session")
def lmm_data():
    """Linear design, 40 groups of 6."""
    return simulate(SimConfig.lmm_default(), 0, 40)


@pytest.fixture(scope="session")
def logistic_data():
    return simulate(SimConfig.logistic_default(), 0, 200)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    RESULTS = getattr(module, "RESULTS", None)
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
