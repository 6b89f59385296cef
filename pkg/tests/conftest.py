import numpy as np
import pytest

from stochmpc import lti
from stochmpc.dist import uniform_box
from stochmpc.setalg import Polytope

A_DI = np.array([[1.0, 1.0], [0.0, 1.0]])
B_DI = np.array([[0.5], [1.0]])


def di_constraints(scale: float = 1.0) -> Polytope:
    """``|x1| <= 5, |x2| <= 2, |u| <= 1`` (optionally scaled)."""
    return Polytope.box([-5.0, -2.0, -1.0], [5.0, 2.0, 1.0]).scale(scale)


@pytest.fixture(scope="session")
def di_sys():
    return lti.LinearSystem(A_DI, B_DI, np.eye(2))


@pytest.fixture(scope="session")
def di_dist():
    return uniform_box([0.1, 0.1])


@pytest.fixture(scope="session")
def di_z():
    return di_constraints()


@pytest.fixture(scope="session")
def di_affine(di_sys, di_z, di_dist):
    from stochmpc import smpc_affine

    return smpc_affine.build(di_sys, di_z, 3, np.eye(2), np.eye(1), di_dist)


@pytest.fixture(scope="session")
def di_striped(di_sys, di_z, di_dist):
    from stochmpc import smpc_striped

    chance = smpc_striped.ChanceConstraintSpec([[0.0, 1.0]], [[0.0]], [1.5], [0.9])
    return smpc_striped.design(di_sys, di_z, 3, np.eye(2), np.eye(1), di_dist, chance=chance)


_ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record ``(passed, detail)`` for an acceptance criterion; printed in the terminal summary."""

    def record(number: int, passed: bool, detail: str):
        _ACCEPTANCE[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 11):
        if number in _ACCEPTANCE:
            ok, detail = _ACCEPTANCE[number]
            terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {number:2d}: NOT RUN")
