import numpy as np
import pytest

from artifact.homogenize import TorusGeometry
from artifact.materials import MultiphaseLaw, PhaseMaterial, YieldSet
from artifact.plate import PlateGrid, make_datum


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def soft():
    return PhaseMaterial(1.0, 1.0, 0.5, 0.2, YieldSet("von_mises", 0.01))


@pytest.fixture
def stiff():
    return PhaseMaterial(2.0, 1.5, 0.3, 0.1, YieldSet("von_mises", 0.02))


@pytest.fixture
def stripes_law(soft, stiff):
    return MultiphaseLaw([soft, stiff], TorusGeometry.stripes(2))


@pytest.fixture
def small_grid():
    return PlateGrid(9, 9, gamma_D=("left", "right"))


@pytest.fixture
def mixed_datum():
    return make_datum("mixed", 0.05)


def pytest_terminal_summary(terminalreporter):
    from criteria import RESULTS, summary_lines

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in summary_lines():
            terminalreporter.write_line(line)
