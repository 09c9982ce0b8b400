import pytest

from cirsv.expansion import CIRParams, build_expansion
from cirsv.volprocess import HKernel, VolParams, clustering_drift, moments, stationary_density

# Filled by tests/test_acceptance.py, printed at the end of the run.
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def vol():
    return VolParams()


@pytest.fixture(scope="session")
def cir():
    return CIRParams()


@pytest.fixture(scope="session")
def density(vol):
    return stationary_density(clustering_drift(vol), vol)


@pytest.fixture(scope="session")
def mom(density):
    return moments(density)


@pytest.fixture(scope="session")
def kernel(density, mom):
    return HKernel(density, mom.sigma2)


@pytest.fixture(scope="session")
def coeffs5(vol, density):
    """Expansion tables on [0, 5] with the reference parameters."""
    return build_expansion(vol, CIRParams(maturity=5.0), density=density)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
