import numpy as np
import pytest

from ksmeanfield import field as fld
from ksmeanfield import potential as pot

# criterion number -> (passed, detail), filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, name, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture(scope="session")
def grid128():
    return fld.Grid2D(half_width=8.0, n=128)


@pytest.fixture(scope="session")
def table03():
    return pot.build_potential_table(1.0, pot.MollifierSpec(pot.SMOOTH_BUMP, 0.3))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
