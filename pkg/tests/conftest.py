import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kolmokernel.operators import build_example_operator, constant_field  # noqa: E402
from kolmokernel.solver import (SolverConfig, SpaceTimeGrid, solve_kernel_slice,  # noqa: E402
                                solve_reference_kernel_g0)

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture(scope="session")
def config_dir():
    return CONFIG_DIR


@pytest.fixture(scope="session")
def heat_slice():
    grid = SpaceTimeGrid(1, 8.0, 513, 0.0, 1.0, 512)
    return solve_kernel_slice(constant_field(1), 1.0, [0.0], SolverConfig(), grid)


@pytest.fixture(scope="session")
def example_field():
    return build_example_operator(0, 3, 2)


@pytest.fixture(scope="session")
def example_grid():
    return SpaceTimeGrid(1, 4.0, 513, 0.0, 1.0, 512)


@pytest.fixture(scope="session")
def example_slice(example_field, example_grid):
    return solve_kernel_slice(example_field, 1.0, [0.0], SolverConfig(), example_grid)


@pytest.fixture(scope="session")
def example_slice0(example_field, example_grid):
    return solve_reference_kernel_g0(example_field, 1.0, [0.0], SolverConfig(), example_grid)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


E2, E4, E8 = math.e**2, math.e**4, math.e**8


# -- acceptance reporting: one pass/fail line per criterion ---------------------

_ACCEPTANCE: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    _ACCEPTANCE[number] = (title, "PASS" if rep.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, verdict = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}  {verdict}  {title}")
