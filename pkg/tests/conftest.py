import numpy as np
import pytest

from dynamics import THREADS_ENV, SimConfig
from lyapunov import derive_params
from potentials import make_bump_double_well, make_quadratic


@pytest.fixture(autouse=True)
def _no_thread_override(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)


@pytest.fixture
def quadratic():
    return make_quadratic(1)


@pytest.fixture
def quadratic_2d():
    return make_quadratic(2)


@pytest.fixture(scope="session")
def bump():
    return make_bump_double_well(2.0, 1.0)


@pytest.fixture
def quadratic_lp(quadratic):
    return derive_params(quadratic)


@pytest.fixture
def small_sim():
    return SimConfig(dt=0.01, t_final=1.0, n_paths=2000, master_seed=7, workers=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
