"""Shared fixtures and the acceptance summary printed after the run."""
import numpy as np
import pytest

from rainstorm.gridio import GridGeometry

ACCEPTANCE_RESULTS = []


def record(criterion, ok, detail=""):
    """Log one acceptance criterion result and print its PASS/FAIL line."""
    line = f"{'PASS' if ok else 'FAIL'}  {criterion}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_RESULTS.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)


@pytest.fixture
def geom():
    return GridGeometry(nx=20, ny=15, dx_km=12.0, dy_km=12.0, lat0=35.0, lon0=-100.0,
                        dt_hours=3.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
