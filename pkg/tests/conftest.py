import numpy as np
import pytest

from mrkf import adm1r3, ekf


@pytest.fixture(scope="session")
def model():
    return adm1r3.Adm1r3Model()


@pytest.fixture(scope="session")
def maps():
    return ekf.NormalizationMaps.default()


@pytest.fixture(scope="session")
def table_state():
    """Published operating-point state vector."""
    return adm1r3.reference_steady_state()


@pytest.fixture(scope="session")
def steady_state_nominal(model):
    """Steady state at the nominal mean feed rate (cached per session)."""
    return model.steady_state(29.821)


def rk4_fixed(rhs, x0, t0, t1, h):
    """Independent fixed-step fourth-order Runge-Kutta oracle."""
    x = np.array(x0, dtype=float)
    t = t0
    n = int(round((t1 - t0) / h))
    for _ in range(n):
        k1 = rhs(t, x)
        k2 = rhs(t + h / 2, x + h / 2 * k1)
        k3 = rhs(t + h / 2, x + h / 2 * k2)
        k4 = rhs(t + h, x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return x
