import numpy as np
import pytest

from inchworm_chain.bath import table_for
from inchworm_chain.config import SIGMA_Z, SpinParams, BathParams, TimeGrid
from inchworm_chain.inchworm import solve_all
from inchworm_chain.spin_algebra import SpinClass

BATH = BathParams(xi=0.2, beta=5.0, omega_c=2.5, omega_max=10.0)


def make_spin(epsilon=1.0, delta=1.0, J=0.2, dt=0.2, n_steps=4, observable=SIGMA_Z, initial=1):
    params = SpinParams(epsilon, delta, J, initial_state=initial, observable=observable)
    return SpinClass.build(params, TimeGrid(dt, n_steps))


def make_table(spin, xi=0.2):
    bath = BathParams(xi=xi, beta=BATH.beta, omega_c=BATH.omega_c, omega_max=BATH.omega_max)
    return table_for(bath, spin.grid)


@pytest.fixture(scope="session")
def small_store():
    """Solved single-spin store on a 4-step grid, two crosses, M = 3."""
    spin = make_spin()
    table = make_table(spin)
    return spin, table, solve_all(spin, table, m_bar=3, n_bar=2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)
