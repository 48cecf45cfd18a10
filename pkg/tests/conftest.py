import numpy as np
import pytest

from gridmargin import (
    BranchSpec,
    BusKind,
    BusSpec,
    GridCase,
    StaticDispatchModel,
    ZipSplit,
    newton_solve,
    study_case9mod1_dynamic,
    study_case9mod1_static,
    study_case9mod2,
)


def two_bus_case(r=0.0, x=1.0, p_load=-0.3, q_load=0.0):
    buses = (
        BusSpec(1, BusKind.SLACK, v_setpoint=1.0),
        BusSpec(2, BusKind.PQ, p_mw=p_load * 100.0, q_mvar=q_load * 100.0),
    )
    return GridCase("twobus", 100.0, buses, (BranchSpec(1, 2, r, x),))


@pytest.fixture(scope="session")
def two_bus_model():
    case = two_bus_case()
    return StaticDispatchModel(case, [("P", 1), ("P", 2)])


@pytest.fixture(scope="session")
def two_bus_pq_model():
    case = two_bus_case(x=0.5, p_load=-0.3, q_load=-0.1)
    return StaticDispatchModel(case, [("P", 1), ("P", 2), ("Q", 2)])


@pytest.fixture(scope="session")
def m9_static():
    return study_case9mod1_static()


@pytest.fixture(scope="session")
def m9_dynamic():
    return study_case9mod1_dynamic()


@pytest.fixture(scope="session")
def m9mod2():
    return study_case9mod2()


def solved_base(model):
    y = newton_solve(model, model.x_base, model.flat_start())
    x = model.complete_x(model.x_base, y)
    return x, y


@pytest.fixture(scope="session")
def m9_static_base(m9_static):
    return solved_base(m9_static)


@pytest.fixture(scope="session")
def m9mod2_base(m9mod2):
    return solved_base(m9mod2)


def fd_jacobian(fun, w, eps=1e-6):
    """Central finite differences of a vector function."""
    w = np.asarray(w, dtype=float)
    f0 = np.asarray(fun(w))
    J = np.zeros((f0.size, w.size))
    for j in range(w.size):
        wp = w.copy()
        wm = w.copy()
        wp[j] += eps
        wm[j] -= eps
        J[:, j] = (np.asarray(fun(wp)) - np.asarray(fun(wm))) / (2 * eps)
    return J


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return np.max(np.abs(a - b) / denom)
