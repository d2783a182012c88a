import warnings

import numpy as np
import pytest

from otfwi.wave import Acquisition, Grid2D, TimeAxis, VelocityModel, max_stable_dt, ricker


ACCEPTANCE_LINES: list[str] = []


def pytest_addoption(parser):
    parser.addoption("--skipperf", action="store_true", default=False,
                     help="skip timing benchmarks (they are load sensitive)")


def pytest_collection_modifyitems(config, items):
    if not config.getoption("--skipperf"):
        return
    skip = pytest.mark.skip(reason="timing benchmark skipped with --skipperf")
    for item in items:
        if "perf" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def report():
    """``report(number, title, passed, detail)`` prints and records one PASS/FAIL line."""

    def _report(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"[{number:02d}] {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return passed

    return _report


@pytest.fixture(autouse=True)
def _quiet_degenerate():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*degenerate trace.*")
        yield


@pytest.fixture(scope="session")
def small_problem():
    """20 x 20 model with a velocity blob, two shots and a surface receiver line."""
    g = Grid2D(20, 20, 50.0, 50.0)
    zz, xx = np.meshgrid(g.z, g.x, indexing="ij")
    blob = np.exp(-((zz - 500.0) ** 2 + (xx - 475.0) ** 2) / (2 * 150.0**2))
    truth = VelocityModel(g, 2.0 + 0.5 * blob)
    initial = VelocityModel(g, 2.0 + 0.1 * blob)
    axis = TimeAxis(300, 0.004)
    assert axis.dt <= max_stable_dt(g, 2.5)
    acq = Acquisition([(100.0, 200.0), (100.0, 750.0)], [(50.0, x) for x in g.x], ricker(8.0, 0.15, axis))
    return g, truth, initial, acq
