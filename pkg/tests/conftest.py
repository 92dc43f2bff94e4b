import numpy as np
import pytest

from vpscatter.expansion import build_table
from vpscatter.profile import default_base_grid, default_profile


@pytest.fixture(scope="session")
def profile():
    return default_profile()


@pytest.fixture(scope="session")
def table1(profile):
    """Default profile, K = 1, n = 64."""
    return build_table(profile, 1, default_base_grid(profile, 64))


@pytest.fixture(scope="session")
def table2(profile):
    """Default profile, K = 2, n = 64."""
    return build_table(profile, 2, default_base_grid(profile, 64))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA: dict = {}


@pytest.fixture(scope="session")
def criterion_log():
    """Collects one result line per acceptance criterion."""
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
