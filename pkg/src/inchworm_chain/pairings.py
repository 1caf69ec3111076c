"""Wick pairings, connected pairings and the bath influence functionals built from them."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .bath import BathTable, b_lookup

MAX_ORDER = 12

Pairing = tuple[tuple[int, int], ...]


class EvalCounter:
    """Thread-safe tally of influence-functional and kernel evaluations."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.influence = 0
        self.kernel = 0

    def add(self, influence: int = 0, kernel: int = 0) -> None:
        with self._lock:
            self.influence += int(influence)
            self.kernel += int(kernel)

    def reset(self) -> None:
        with self._lock:
            self.influence = 0
            self.kernel = 0

    def snapshot(self) -> tuple[int, int]:
        with self._lock:
            return self.influence, self.kernel


COUNTER = EvalCounter()


def _check_order(M: int) -> None:
    if M < 2 or M % 2:
        raise ValueError(f"pairings need an even order >= 2, got {M}")
    if M > MAX_ORDER:
        raise ValueError(f"order {M} exceeds the supported maximum {MAX_ORDER}")


def _pairings_of(items: tuple[int, ...]):
    if not items:
        yield ()
        return
    first, rest = items[0], items[1:]
    for i, partner in enumerate(rest):
        for tail in _pairings_of(rest[:i] + rest[i + 1:]):
            yield ((first, partner),) + tail


@lru_cache(maxsize=None)
def enumerate_pairings(M: int) -> tuple[Pairing, ...]:
    """All perfect matchings of ``1..M``; the smallest free index is paired first."""
    _check_order(M)
    return tuple(_pairings_of(tuple(range(1, M + 1))))


def _interleaved(p: tuple[int, int], q: tuple[int, int]) -> bool:
    (a, b), (c, d) = sorted((p, q))
    return a < c < b < d


def is_connected(pairing: Pairing) -> bool:
    """True when the arcs form one component under the crossing relation."""
    arcs = list(pairing)
    if len(arcs) <= 1:
        return True
    seen = {0}
    frontier = [0]
    while frontier:
        i = frontier.pop()
        for j in range(len(arcs)):
            if j not in seen and _interleaved(arcs[i], arcs[j]):
                seen.add(j)
                frontier.append(j)
    return len(seen) == len(arcs)


@lru_cache(maxsize=None)
def enumerate_connected(M: int) -> tuple[Pairing, ...]:
    return tuple(p for p in enumerate_pairings(M) if is_connected(p))


@dataclass(frozen=True)
class PairingSet:
    order: int
    all_pairings: tuple[Pairing, ...]
    connected_pairings: tuple[Pairing, ...]

    @classmethod
    def build(cls, M: int) -> PairingSet:
        return cls(M, enumerate_pairings(M), enumerate_connected(M))


def connected_index_array(m_bar: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero-based connected pairings of ``1..M+1`` for every odd ``M <= m_bar``.

    Returns ``(pairs, counts)`` with ``pairs[i, q]`` the q-th pairing for
    ``M = 2 i + 1`` (padded) and ``counts[i]`` the number of pairings.
    """
    orders = list(range(1, m_bar + 1, 2))
    sets = [enumerate_connected(M + 1) for M in orders]
    width = max(len(s) for s in sets)
    pairs = np.zeros((len(orders), width, (m_bar + 1) // 2, 2), dtype=np.int64)
    counts = np.zeros(len(orders), dtype=np.int64)
    for i, s in enumerate(sets):
        counts[i] = len(s)
        for q, pairing in enumerate(s):
            for k, (j, jp) in enumerate(pairing):
                pairs[i, q, k] = (j - 1, jp - 1)
    return pairs, counts


def _pair_sum(table: BathTable, taus, pairings) -> complex:
    total = 0j
    for pairing in pairings:
        prod = 1 + 0j
        for j, jp in pairing:
            prod *= b_lookup(table, taus[j - 1], taus[jp - 1])
        total += prod
    return total


def influence_full(table: BathTable, taus) -> complex:
    """Sum over all pairings of products of correlations; zero for odd length, one when empty."""
    M = len(taus)
    if M == 0:
        return 1 + 0j
    if M % 2:
        return 0j
    return _pair_sum(table, taus, enumerate_pairings(M))


def influence_connected(table: BathTable, taus, counter: EvalCounter = COUNTER) -> complex:
    """Connected-pairing influence functional for ``M + 1`` times with ``M`` odd."""
    if len(taus) % 2:
        raise ValueError("connected influence needs an even number of times")
    counter.add(influence=1)
    return _pair_sum(table, taus, enumerate_connected(len(taus)))
