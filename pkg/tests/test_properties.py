import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from inchworm_chain.bath import b_lookup, correlation_value, discretize_ohmic, table_for
from inchworm_chain.config import BathParams, TimeGrid, config_from_dict, config_to_dict, uniform_chain
from inchworm_chain.inchworm import CrossKey, Side, canonicalize, colex_rank
from inchworm_chain.oracle import bare_diagram_sum, exact_closed_chain
from inchworm_chain.pairings import enumerate_connected, enumerate_pairings, is_connected
from inchworm_chain.resummation import StoreCache, iter_tuples, run_chain, simplex_weight
from inchworm_chain.spin_algebra import interaction_picture, shift_conjugate

from conftest import make_spin

SLOW = settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])

baths = st.builds(BathParams, xi=st.floats(0.01, 1.0), beta=st.floats(0.5, 20.0),
                  omega_c=st.floats(0.5, 5.0), omega_max=st.floats(2.0, 20.0),
                  n_osc=st.integers(10, 200))


@given(st.sampled_from([2, 4, 6, 8]), st.data())
def test_pairings_are_perfect_matchings(M, data):
    pairing = data.draw(st.sampled_from(enumerate_pairings(M)))
    flat = sorted(x for pair in pairing for x in pair)
    assert flat == list(range(1, M + 1))
    assert all(a < b for a, b in pairing)


@given(st.sampled_from([4, 6, 8]), st.integers(1, 7), st.data())
def test_connectivity_is_rotation_invariant(M, shift, data):
    pairing = data.draw(st.sampled_from(enumerate_pairings(M)))
    rotated = tuple(tuple(sorted(((a - 1 + shift) % M + 1, (b - 1 + shift) % M + 1)))
                    for a, b in pairing)
    assert is_connected(pairing) == is_connected(rotated)


@given(st.sampled_from([2, 4, 6, 8]))
def test_connected_subset(M):
    conn = set(enumerate_connected(M))
    assert conn <= set(enumerate_pairings(M))
    assert all(is_connected(p) for p in conn)


@given(baths, st.floats(-20, 20))
def test_correlation_conjugate_symmetry(bath, lag):
    spec = discretize_ohmic(bath)
    a = correlation_value(spec, bath.beta, lag)
    b = correlation_value(spec, bath.beta, -lag)
    assert a == pytest.approx(np.conj(b), abs=1e-12 * (1 + abs(a)))


@given(baths)
def test_spectrum_monotone_and_bounded(bath):
    spec = discretize_ohmic(bath)
    assert np.all(np.diff(spec.omegas) > 0)
    assert spec.omegas[-1] == pytest.approx(bath.omega_max, rel=1e-12)
    assert np.all(spec.couplings >= 0)


@given(st.integers(-6, 6), st.integers(-6, 6))
def test_lookup_conjugate_pairs(ja, jb):
    table = table_for(BathParams(0.3, 4.0, 2.0, 8.0, 50), TimeGrid(0.25, 6))
    a, b = ja * 0.25, jb * 0.25
    assert b_lookup(table, a, b) == np.conj(b_lookup(table, b, a))
    assert b_lookup(table, a, b) == b_lookup(table, -a, -b)


@given(st.integers(1, 4), st.integers(1, 4), st.floats(-2, 2), st.floats(-2, 2))
def test_shift_group_law(j1, j2, eps, delta):
    spin = make_spin(epsilon=eps, delta=delta, dt=0.2, n_steps=4)
    a = np.array([[0.3, 1 - 1j], [2j, -0.7]])
    two = shift_conjugate(spin, shift_conjugate(spin, a, 0.2 * j1), 0.2 * j2)
    assert np.max(np.abs(two - shift_conjugate(spin, a, 0.2 * (j1 + j2)))) < 1e-12


@given(st.integers(-8, 8), st.floats(-2, 2), st.floats(-2, 2))
def test_interaction_picture_preserves_spectrum(j, eps, delta):
    spin = make_spin(epsilon=eps, delta=delta, dt=0.1, n_steps=8)
    a = np.array([[1.0, 0.5 - 0.2j], [0.5 + 0.2j, -0.3]])
    b = interaction_picture(spin, a, 0.1 * j)
    assert np.allclose(b, b.conj().T, atol=1e-14)
    assert np.allclose(np.linalg.eigvalsh(b), np.linalg.eigvalsh(a), atol=1e-13)


@given(st.integers(1, 12), st.floats(0.01, 1.0))
def test_low_order_simplex_exact(hi, dt):
    T = hi * dt
    s1 = sum(simplex_weight(xs, hi, dt) for xs in iter_tuples(hi + 1, 1))
    s2 = sum(simplex_weight(xs, hi, dt) for xs in iter_tuples(hi + 1, 2))
    assert s1 == pytest.approx(T, rel=1e-12)
    assert s2 == pytest.approx(T * T / 2, rel=1e-12)


@given(st.lists(st.integers(0, 12), min_size=0, max_size=4))
def test_colex_rank_matches_enumeration(xs):
    xs = sorted(xs)
    tuples = list(iter_tuples(13, len(xs)))
    assert tuples[colex_rank(xs)] == tuple(xs)


@given(st.integers(-8, 8), st.integers(0, 8), st.lists(st.integers(0, 100), max_size=3), st.integers(1, 5))
def test_canonical_form_is_shift_invariant(s_i, length, picks, t):
    s_f = s_i + length
    crosses = tuple(sorted(s_i + p % (length + 1) for p in picks))
    key = CrossKey(s_i, crosses, s_f)
    canon, shift, _ = canonicalize(key)
    if key.side is Side.STRADDLING:
        assert canon == key and shift == 0
        return
    assert shift >= 0
    if key.side is Side.POSITIVE:
        assert canon.s_i == 0 and key.shifted(t).side is Side.POSITIVE
        assert canonicalize(key.shifted(t))[0] == canon
    else:
        assert canon.s_f == 0 and key.shifted(-t).side is Side.NEGATIVE
        assert canonicalize(key.shifted(-t))[0] == canon


@given(st.integers(1, 6), st.floats(-2, 2), st.floats(-2, 2), st.floats(-1, 1),
       st.floats(0, 1), st.integers(1, 3), st.integers(0, 5))
def test_config_roundtrip(K, eps, delta, J, xi, n_bar, target):
    cfg = uniform_chain(K, epsilon=eps, delta=delta, J=J, xi=xi, n_bar=n_bar, target=min(target, K - 1))
    assert config_from_dict(config_to_dict(cfg)) == cfg


@SLOW
@given(st.integers(2, 3), st.floats(-1.5, 1.5), st.floats(0.2, 1.5), st.floats(-0.8, 0.8),
       st.floats(0.0, 0.5), st.sampled_from([1, -1]))
def test_distributive_law_random_chains(K, eps, delta, J, xi, initial):
    cfg = uniform_chain(K, epsilon=eps, delta=delta, J=J, xi=xi, n_steps=2, m_bar=1, n_bar=2,
                        initial=initial, n_osc=40)
    cache = StoreCache(cfg)
    result = run_chain(cfg, cache=cache)
    stores = [cache.store(k, sp.observable) for k, (sp, _) in enumerate(cfg.spins)]
    for l in (1, 2):
        assert abs(bare_diagram_sum(stores, cfg, l) - result.values[l - 1, 0]) < 1e-12


@SLOW
@given(st.integers(2, 6), st.floats(-2, 2), st.floats(-2, 2), st.floats(-1, 1))
def test_closed_chain_mirror_and_bounds(K, eps, delta, J):
    cfg = uniform_chain(K, epsilon=eps, delta=delta, J=J, xi=0.0)
    v = exact_closed_chain(cfg, [0.0, 0.7, 2.3])
    assert np.allclose(v[0], 1.0)
    assert np.all(np.abs(v) <= 1 + 1e-12)
    assert np.allclose(v, v[:, ::-1], atol=1e-11)


@SLOW
@given(st.floats(-1.5, 1.5), st.floats(0.2, 1.5), st.floats(-0.8, 0.8))
def test_engine_mirror_symmetry(eps, delta, J):
    cfg = uniform_chain(4, epsilon=eps, delta=delta, J=J, n_steps=2, m_bar=1, n_bar=2, n_osc=40)
    v = run_chain(cfg, targets=range(4)).values
    assert np.max(np.abs(v - v[:, ::-1])) < 1e-10
