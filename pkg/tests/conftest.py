import numpy as np
import pytest

from dnpairs.fixedfreq import FreqConfig, build_pair, build_test_function
from dnpairs.tensorfield import identity_matrix

SWEEP = (0.02, 0.04, 0.08)
LAMBDA0 = -17.5

_ACCEPTANCE = []


def record_criterion(number, title, passed, detail):
    line = f"CRITERION {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    _ACCEPTANCE.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def freq_config():
    return FreqConfig()


@pytest.fixture(scope="session")
def moment(freq_config):
    return build_test_function(identity_matrix(), freq_config.Q0, freq_config.q, freq_config.moment)


@pytest.fixture(scope="session")
def freq_pairs(moment, freq_config):
    """Default fixed-frequency pairs for the sweep and for eps = 0.05."""
    g = identity_matrix()
    return {e: build_pair(g, LAMBDA0, e, freq_config, moment=moment) for e in SWEEP + (0.05,)}
