import numpy as np
import pytest

from riskwadc.netmodel import build_continuous, discretize, DiscreteSystem
from riskwadc.systems import two_area


@pytest.fixture(scope="session")
def two_area_model():
    net, op, params = two_area()
    return net, op, discretize(build_continuous(net, op), 0.01)


@pytest.fixture(scope="session")
def two_area_sys(two_area_model):
    return two_area_model[2]


def random_stable_system(rng, n, m, rho=0.9):
    """Random (A, B) with spectral radius ``rho``; no generator structure."""
    A = rng.standard_normal((n, n))
    A *= rho / np.max(np.abs(np.linalg.eigvals(A)))
    B = rng.standard_normal((n, m))
    return DiscreteSystem(A, B, 0.01)


# criterion number -> (passed, detail); filled by test_acceptance, printed at the end
ACCEPTANCE = {}


def report(number, passed, detail=""):
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
