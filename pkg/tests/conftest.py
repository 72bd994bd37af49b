import numpy as np
import pytest

from lanoboed.forward import ForwardModel, SimulationConfig
from lanoboed.geometry import GaussianPrior, build_geometry


def make_problem(n, **sim):
    mesh, mat = build_geometry(n, n)
    prior = GaussianPrior(mesh, mat)
    return mesh, mat, prior, ForwardModel(mesh, mat, SimulationConfig(**sim))


@pytest.fixture(scope="session")
def grid8():
    return make_problem(8, T=2.0, n_obs=4)


@pytest.fixture(scope="session")
def grid16():
    return make_problem(16)


@pytest.fixture(scope="session")
def prior16(grid16):
    return grid16[2]


@pytest.fixture(scope="session")
def linear8():
    """8x8 frozen-reaction model observed at four nodes, with its dense closed forms."""
    from lanoboed.verify import linear_problem

    return linear_problem()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.acceptance_lines = {}


def pytest_terminal_summary(terminalreporter, config):
    lines = config.acceptance_lines
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
