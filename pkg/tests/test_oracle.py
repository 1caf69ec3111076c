import json
from functools import reduce

import numpy as np
import pytest

from inchworm_chain.config import BathParams, config_from_dict, uniform_chain
from inchworm_chain.oracle import (
    bare_diagram_sum, bath_refinement, dyson_single_spin, exact_closed_chain,
    highres_bath_correlation, ising_hamiltonian,
)
from inchworm_chain.resummation import StoreCache, run_chain, spin_trace
from inchworm_chain.spin_algebra import SIGMA_Z

from conftest import make_spin, make_table

# <sigma_z^k(2)> for the closed 3-spin chain, eps = delta = 1, J = 0.2, all spins up
CLOSED_K3_T2 = [0.9145626934040764, 0.9223242369865726, 0.9145626934040764]


def taylor_state(h, psi, t, steps=200, terms=30):
    dt = t / steps
    for _ in range(steps):
        term, acc = psi, psi.copy()
        for n in range(1, terms):
            term = (-1j * dt / n) * (h @ term)
            acc = acc + term
        psi = acc
    return psi


def test_single_spin_precession():
    cfg = uniform_chain(1, epsilon=0.0, delta=1.0, xi=0.0)
    times = np.linspace(0, 3, 7)
    assert np.allclose(exact_closed_chain(cfg, times)[:, 0], np.cos(2 * times), atol=1e-13)


def test_decoupled_spins_follow_own_curves():
    data = {"numerics": {"dt": 0.1, "n_steps": 5},
            "spins": [{"epsilon": e, "delta": 1.0, "J": 0.0,
                       "bath": {"xi": 0.0, "beta": 5.0, "omega_c": 2.5, "omega_max": 10.0}}
                      for e in (0.0, 0.5, 1.3)]}
    cfg = config_from_dict(data)
    times = [0.4, 1.1]
    chain = exact_closed_chain(cfg, times)
    for k, (sp, _) in enumerate(cfg.spins):
        alone = config_from_dict({**data, "spins": [data["spins"][k]]})
        assert np.allclose(chain[:, k], exact_closed_chain(alone, times)[:, 0], atol=1e-13)


def test_closed_chain_frozen_values():
    cfg = uniform_chain(3, xi=0.0)
    assert np.allclose(exact_closed_chain(cfg, [2.0])[0], CLOSED_K3_T2, atol=1e-13)
    psi0 = np.zeros(8, dtype=complex)
    psi0[0] = 1
    psi = taylor_state(ising_hamiltonian(cfg), psi0, 2.0)
    for k in range(3):
        z = reduce(np.kron, [SIGMA_Z if j == k else np.eye(2) for j in range(3)])
        assert np.vdot(psi, z @ psi).real == pytest.approx(CLOSED_K3_T2[k], abs=1e-12)


def test_closed_chain_rejects_bath():
    with pytest.raises(ValueError):
        exact_closed_chain(uniform_chain(2, xi=0.1), [1.0])


def _bare_vs_engine(cfg):
    cache = StoreCache(cfg)
    result = run_chain(cfg, cache=cache)
    stores = [cache.store(k, sp.observable) for k, (sp, _) in enumerate(cfg.spins)]
    return result, stores


def test_uncrossed_cap_gives_product():
    cfg = uniform_chain(3, n_steps=2, m_bar=1, n_bar=0)
    result, stores = _bare_vs_engine(cfg)
    for l in (1, 2):
        want = np.prod([spin_trace(s, (), l) for s in stores])
        assert bare_diagram_sum(stores, cfg, l) == pytest.approx(want, abs=1e-15)


@pytest.mark.parametrize("K,L,n_bar", [(2, 3, 2), (4, 1, 1)])
def test_bond_sum_matches_engine(K, L, n_bar):
    cfg = uniform_chain(K, n_steps=L, m_bar=1, n_bar=n_bar)
    result, stores = _bare_vs_engine(cfg)
    for l in range(1, L + 1):
        assert abs(bare_diagram_sum(stores, cfg, l) - result.values[l - 1, 0]) < 1e-12


def test_bond_sum_size_guard():
    cfg = uniform_chain(4, n_steps=2, m_bar=1, n_bar=2)
    _, stores = _bare_vs_engine(cfg)
    with pytest.raises(ValueError):
        bare_diagram_sum(stores, cfg, 2, max_terms=10)


def test_dyson_without_bath_is_exact():
    spin = make_spin(epsilon=0.0, delta=1.0, dt=0.1, n_steps=6)
    table = make_table(spin, xi=0.0)
    for l in (2, 6):
        assert dyson_single_spin(spin, table, 4, l) == pytest.approx(np.cos(0.2 * l), abs=1e-14)


def test_dyson_zeroth_order():
    spin = make_spin(dt=0.2, n_steps=4)
    table = make_table(spin, xi=0.3)
    u = spin.unitaries[3]
    want = np.trace(u @ spin.initial_rho @ u.conj().T @ spin.o_s)
    assert dyson_single_spin(spin, table, 0, 3) == pytest.approx(want, abs=1e-15)
    with pytest.raises(ValueError):
        dyson_single_spin(spin, table, 8, 1)


def test_highres_correlation():
    zero = BathParams(0.0, 5.0, 2.5, 10.0)
    assert highres_bath_correlation(zero, 0.6) == 0
    bath = BathParams(0.2, 5.0, 2.5, 10.0)
    assert highres_bath_correlation(bath, 0.0).imag == 0


def test_refinement_shrinks():
    devs = bath_refinement(BathParams(0.2, 5.0, 2.5, 10.0), np.arange(0, 4.01, 0.2))
    seq = [devs[n] for n in sorted(devs)]
    assert len(seq) == 4
    assert all(b < a for a, b in zip(seq, seq[1:]))
