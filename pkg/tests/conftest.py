import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from diracspec.acceptance import AcceptanceContext
from diracspec.geometry import ConformalFactor, build_sphere_basis, build_torus_basis

settings.register_profile("repo", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("repo")

UNIT_SQUARE = ((1.0, 0.0), (0.0, 1.0))


@pytest.fixture(scope="session")
def sphere6():
    return build_sphere_basis(6)


@pytest.fixture(scope="session")
def torus_half():
    return build_torus_basis(UNIT_SQUARE, (0.5, 0.0), 12.0)


@pytest.fixture(scope="session")
def torus_zero():
    return build_torus_basis(UNIT_SQUARE, (0.0, 0.0), 12.0)


@pytest.fixture(scope="session")
def acceptance_ctx():
    """Shared between the acceptance and CLI tests so the long runs happen once."""
    return AcceptanceContext()


def constant(basis, c=1.0, p=2.0):
    return ConformalFactor(np.full(basis.n_nodes, float(c)), basis.weights, p=p)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
