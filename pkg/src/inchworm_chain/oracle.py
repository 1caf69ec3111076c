"""Brute-force references: closed chains, explicit bond sums, bare Dyson series, fine baths."""

from __future__ import annotations

import itertools
from dataclasses import replace
from functools import reduce

import numpy as np

from .bath import BathTable, correlation_value, correlation_values, discretize_ohmic
from .config import BathParams, ChainConfig
from .pairings import enumerate_pairings
from .resummation import iter_tuples, simplex_weight, spin_trace
from .spin_algebra import ID2, SIGMA_X, SIGMA_Z, SpinClass, trace_with

MAX_DENSE_SPINS = 12
REFINE_FACTOR = 16


def _site_operator(op: np.ndarray, k: int, n: int) -> np.ndarray:
    return reduce(np.kron, [op if j == k else ID2 for j in range(n)])


def ising_hamiltonian(cfg: ChainConfig) -> np.ndarray:
    n = cfg.n_spins
    dim = 2 ** n
    h = np.zeros((dim, dim), dtype=complex)
    for k, (sp, _) in enumerate(cfg.spins):
        h += sp.epsilon * _site_operator(SIGMA_Z, k, n) + sp.delta * _site_operator(SIGMA_X, k, n)
    for k in range(n - 1):
        coupling = cfg.spins[k][0].J * cfg.spins[k + 1][0].J
        h += coupling * _site_operator(SIGMA_Z, k, n) @ _site_operator(SIGMA_Z, k + 1, n)
    return h


def exact_closed_chain(cfg: ChainConfig, times) -> np.ndarray:
    """``<sigma_z^k(t)>`` for the isolated chain; shape ``(len(times), K)``."""
    n = cfg.n_spins
    if n > MAX_DENSE_SPINS:
        raise ValueError(f"dense propagation limited to {MAX_DENSE_SPINS} spins")
    if any(bath.xi != 0 for _, bath in cfg.spins):
        raise ValueError("the closed-chain reference needs xi = 0 on every spin")
    psi0 = reduce(np.kron, [np.array([1, 0] if sp.initial_state == 1 else [0, 1], dtype=complex)
                            for sp, _ in cfg.spins])
    energies, vecs = np.linalg.eigh(ising_hamiltonian(cfg))
    coeffs = vecs.conj().T @ psi0
    zdiag = np.array([[1 - 2 * ((idx >> (n - 1 - k)) & 1) for k in range(n)]
                      for idx in range(2 ** n)], dtype=float)
    out = np.empty((len(times), n))
    for i, t in enumerate(times):
        psi = vecs @ (np.exp(-1j * energies * t) * coeffs)
        out[i] = np.abs(psi) ** 2 @ zdiag
    return out


def bare_diagram_sum(stores, cfg: ChainConfig, l: int, max_terms: int = 2_000_000) -> complex:
    """Chain observable at ``t = l dt`` by explicit enumeration of every cross configuration.

    Each link between neighbours carries its own non-descending tuple of cross
    times with the iterated trapezoid weight of that tuple; spin ``k`` sees the
    merged tuples of its two links and configurations where any spin exceeds
    ``n_bar`` crosses are dropped.  No partial sums are reused.
    """
    n_bar = cfg.numerics.n_bar
    dt = cfg.numerics.dt
    K = cfg.n_spins
    per_link = [xs for n in range(n_bar + 1) for xs in iter_tuples(2 * l + 1, n)]
    if len(per_link) ** max(K - 1, 0) > max_terms:
        raise ValueError("instance too large for explicit enumeration")
    states = [sp.initial_state for sp, _ in cfg.spins]
    cache: dict = {}

    def trace(k: int, xs) -> complex:
        key = (k, xs)
        if key not in cache:
            cache[key] = spin_trace(stores[k], [x - l for x in xs], l, states[k])
        return cache[key]

    total = 0j
    for links in itertools.product(per_link, repeat=K - 1):
        counts = [0] * K
        for b, xs in enumerate(links):
            counts[b] += len(xs)
            counts[b + 1] += len(xs)
        if max(counts) > n_bar:
            continue
        w = 1.0
        for xs in links:
            w *= simplex_weight(xs, 2 * l, dt)
        if w == 0.0:
            continue
        term = w
        for k in range(K):
            left = links[k - 1] if k > 0 else ()
            right = links[k] if k < K - 1 else ()
            term *= trace(k, tuple(sorted(left + right)))
            if term == 0:
                break
        total += term
    return complex(total)


def _bath_pair(table: BathTable, j1: int, j2: int) -> complex:
    lag = abs(j1) - abs(j2)
    v = table.values[abs(lag)]
    return complex(v if lag >= 0 else np.conj(v))


def _influence_full(table: BathTable, js) -> complex:
    if not js:
        return 1 + 0j
    total = 0j
    for pairing in enumerate_pairings(len(js)):
        prod = 1 + 0j
        for a, b in pairing:
            prod *= _bath_pair(table, js[a - 1], js[b - 1])
        total += prod
    return total


def _half_simplex(n: int, lo: int, hi: int, dt: float):
    """Grid tuples ``lo <= j_1 <= .. <= j_n <= hi`` with iterated trapezoid weights."""
    for js in itertools.combinations_with_replacement(range(lo, hi + 1), n):
        w = simplex_weight(tuple(j - lo for j in js), hi - lo, dt)
        if w:
            yield js, w


def dyson_single_spin(spin: SpinClass, table: BathTable, m_trunc: int, l: int) -> complex:
    """``tr(rho_I(t) G(-t, t))`` from the bare series with ``M <= m_trunc`` bath insertions.

    The contour integral is split at 0: insertions on ``[-l, 0]`` and on
    ``[0, l]`` are integrated separately, each side seeing its own limit of the
    sign factor, and the observable sits between them.
    """
    if m_trunc > 6:
        raise ValueError("bare series limited to m_trunc <= 6")
    dt = table.dt
    wi = [spin.unitaries[j] @ spin.w @ spin.unitaries[j].conj().T for j in range(l + 1)]
    total = np.zeros((2, 2), dtype=complex)
    for M in range(0, m_trunc + 1, 2):
        for p in range(M + 1):
            for left, wl in _half_simplex(p, -l, 0, dt):
                for right, wr in _half_simplex(M - p, 0, l, dt):
                    g = ID2.copy()
                    for j in left:
                        g = (-1j) * wi[-j] @ g
                    g = spin.o_s @ g
                    for j in right:
                        g = 1j * wi[j] @ g
                    total += wl * wr * _influence_full(table, left + right) * g
    u = spin.unitaries[l]
    return trace_with(u @ spin.initial_rho @ u.conj().T, total)


def highres_bath_correlation(bath: BathParams, lag: float, factor: int = REFINE_FACTOR) -> complex:
    """Correlation at ``lag`` with ``factor`` times more oscillators than configured."""
    fine = discretize_ohmic(replace(bath, n_osc=bath.n_osc * factor))
    return correlation_value(fine, bath.beta, lag)


def bath_refinement(bath: BathParams, lags, counts=(400, 800, 1600, 3200, 6400)) -> dict[int, float]:
    """Relative deviation of each oscillator count from the largest, on the given lags."""
    lags = np.asarray(lags, dtype=float)
    ref = correlation_values(discretize_ohmic(replace(bath, n_osc=counts[-1])), bath.beta, lags)
    scale = np.max(np.abs(ref))
    if scale == 0:
        return {n: 0.0 for n in counts[:-1]}
    out = {}
    for n in counts[:-1]:
        vals = correlation_values(discretize_ohmic(replace(bath, n_osc=n)), bath.beta, lags)
        out[n] = float(np.max(np.abs(vals - ref)) / scale)
    return out
