"""Single-spin full propagators with interspin crosses, solved by the inchworm equation.

Keys ``(s_i, crosses, s_f)`` are grid indices on the unfolded contour ``[-L, L]``.
Every key is stored densely, ranked in colexicographic order of the
non-descending tuple ``(s_i, c_1, .., c_N, s_f)`` after adding ``L``.  Only
the canonical one-sided keys (anchored at 0) and the straddling keys are
integrated; the remaining one-sided keys are filled by shift conjugation.

Sign conventions at the origin (see ``_sign``): a one-sided key sees 0 as the
limit from its own side, so positive keys use +1 and negative keys -1.  For a
straddling key a quadrature node or a cross sitting exactly at 0 carries the
average of both limits, which vanishes because W, V and the observable all
commute with sigma_z.
"""

from __future__ import annotations

import json
import math
import os
import struct
import time
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numba
import numpy as np
from numba import njit, prange

from .bath import BathTable
from .pairings import COUNTER, connected_index_array
from .spin_algebra import ID2, SQRT_I, SQRT_MINUS_I, SpinClass, commutes_with_sigma_z

# the bundled TBB is too old for numba; prefer OpenMP even when numba was imported first
if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

NEGATIVE, POSITIVE, STRADDLING, PLUS = 0, 1, 2, 3

CHECKPOINT_MAGIC = b"INCHWORM"
CHECKPOINT_VERSION = 1


class Side(Enum):
    NEGATIVE = "negative"
    POSITIVE = "positive"
    STRADDLING = "straddling"


class MissingPropagator(RuntimeError):
    """A propagator was requested before it was solved (ordering bug)."""


@dataclass(frozen=True)
class CrossKey:
    s_i: int
    crosses: tuple[int, ...]
    s_f: int

    def __post_init__(self):
        c = tuple(int(x) for x in self.crosses)
        object.__setattr__(self, "crosses", c)
        if self.s_i > self.s_f:
            raise ValueError(f"s_i={self.s_i} exceeds s_f={self.s_f}")
        if any(x > y for x, y in zip(c, c[1:])):
            raise ValueError("crosses must be non-descending")
        if c and (c[0] < self.s_i or c[-1] > self.s_f):
            raise ValueError("crosses must lie in [s_i, s_f]")

    @property
    def side(self) -> Side:
        if self.s_f <= 0:
            return Side.NEGATIVE
        if self.s_i >= 0:
            return Side.POSITIVE
        return Side.STRADDLING

    def shifted(self, t: int) -> CrossKey:
        return CrossKey(self.s_i + t, tuple(x + t for x in self.crosses), self.s_f + t)


def canonicalize(key: CrossKey) -> tuple[CrossKey, int, bool]:
    """Map ``key`` to its stored anchor; returns ``(canonical, shift, jump_flag)``.

    The shift ``T >= 0`` is the distance in ``|s|`` between the key and its
    anchor, so ``G(key) = U_T G(canonical) U_T^dagger`` with ``U_T = exp(-i H T dt)``.
    ``jump_flag`` is set when the key must carry the observable (``s_i < 0 <= s_f``).
    """
    jump = key.s_i < 0 <= key.s_f
    side = key.side
    if side is Side.POSITIVE:
        return key.shifted(-key.s_i), key.s_i, jump
    if side is Side.NEGATIVE:
        return key.shifted(-key.s_f), -key.s_f, jump
    return key, 0, jump


def binomial_table(n_max: int, k_max: int) -> np.ndarray:
    binom = np.zeros((n_max + 1, k_max + 1), dtype=np.int64)
    for n in range(n_max + 1):
        for k in range(min(n, k_max) + 1):
            binom[n, k] = math.comb(n, k)
    return binom


def tuple_count(values: int, length: int) -> int:
    """Number of non-descending tuples of ``length`` drawn from ``values`` symbols."""
    return math.comb(values + length - 1, length)


def colex_rank(xs) -> int:
    return sum(math.comb(x + k, k + 1) for k, x in enumerate(xs))


def store_entries(n_steps: int, n_bar: int) -> int:
    r = 2 * n_steps + 1
    return sum(tuple_count(r, n + 2) for n in range(n_bar + 1))


def store_bytes(n_steps: int, n_bar: int) -> int:
    """Memory for the dense store: four complex128 entries plus one status byte per key."""
    return store_entries(n_steps, n_bar) * (4 * 16 + 1)


# ---------------------------------------------------------------- numba core

@njit(inline="always")
def _mm(x, y, out):
    a = x[0, 0] * y[0, 0] + x[0, 1] * y[1, 0]
    b = x[0, 0] * y[0, 1] + x[0, 1] * y[1, 1]
    c = x[1, 0] * y[0, 0] + x[1, 1] * y[1, 0]
    d = x[1, 0] * y[0, 1] + x[1, 1] * y[1, 1]
    out[0, 0] = a
    out[0, 1] = b
    out[1, 0] = c
    out[1, 1] = d


@njit(inline="always")
def _sign(t, mode):
    if mode == NEGATIVE or mode == PLUS:
        return -1
    if mode == POSITIVE:
        return 1
    if t < 0:
        return -1
    if t > 0:
        return 1
    return 0


@njit(inline="always")
def _key_rank(lo, cr, i0, i1, hi, L, binom):
    r = lo + L
    k = 1
    for i in range(i0, i1):
        r += binom[cr[i] + L + k, k + 1]
        k += 1
    r += binom[hi + L + k, k + 1]
    return r


@njit(inline="always")
def _bath_at(bath, lag):
    if lag >= 0:
        return bath[lag]
    return np.conj(bath[-lag])


@njit(cache=True, nogil=True)
def _kernel(vals, stat, off, binom, WI, O, bath, pairs, npairs, m_bar, dt, L,
            a, cr, N, b, mode, full, out, tau, pre, ptrs):
    """Kernel at key ``(a, cr[:N], b)``; returns the number of influence evaluations or -1."""
    out[:, :] = 0.0
    if b == a:
        return 0
    count = 0
    seg = np.empty((2, 2), dtype=np.complex128)
    tmp = np.empty((2, 2), dtype=np.complex128)
    sf_sign = -1 if mode == NEGATIVE else 1
    for mi in range(m_bar // 2 + 1):
        M = 2 * mi + 1
        for i in range(M):
            tau[i] = a
        pre[0, 0, 0] = 1.0
        pre[0, 0, 1] = 0.0
        pre[0, 1, 0] = 0.0
        pre[0, 1, 1] = 1.0
        ptrs[0] = 0
        dirty = 0
        while True:
            w = 1.0
            sg = sf_sign
            hi = b
            for m in range(M - 1, -1, -1):
                t = tau[m]
                if hi == a:
                    w = 0.0
                    break
                if t == a or t == hi:
                    w *= 0.5 * dt
                else:
                    w *= dt
                sg *= _sign(t, mode)
                hi = t
            if w != 0.0 and sg != 0:
                lc = 0.0 + 0.0j
                for q in range(npairs[mi]):
                    prod = 1.0 + 0.0j
                    for k in range(mi + 1):
                        j1 = pairs[mi, q, k, 0]
                        j2 = pairs[mi, q, k, 1]
                        x1 = b if j1 == M else tau[j1]
                        x2 = b if j2 == M else tau[j2]
                        prod *= _bath_at(bath, abs(x1) - abs(x2))
                    lc += prod
                count += 1
                for m in range(dirty, M + 1):
                    lo = a if m == 0 else tau[m - 1]
                    hi = tau[m] if m < M else b
                    start = ptrs[m]
                    end = start
                    if m < M:
                        while end < N and cr[end] < hi:
                            end += 1
                    else:
                        end = N
                    ptrs[m + 1] = end
                    if lo == a and hi == b and end - start == N:
                        _mm(full, pre[m], tmp)
                    elif lo == hi and end == start:
                        tmp[:, :] = pre[m]
                    else:
                        idx = off[end - start] + _key_rank(lo, cr, start, end, hi, L, binom)
                        if stat[idx] == 0:
                            return -1
                        _mm(vals[idx], pre[m], tmp)
                    if m < M:
                        _mm(WI[abs(hi)], tmp, pre[m + 1])
                    else:
                        pre[m + 1, :, :] = tmp
                dirty = M
                coef = lc * w * sg
                if mi % 2 == 0:
                    coef = -coef
                for r in range(2):
                    for c in range(2):
                        seg[r, c] = pre[M + 1, r, c]
                if mode == PLUS:
                    _mm(O, seg, tmp)
                    _mm(WI[0], tmp, seg)
                else:
                    _mm(WI[abs(b)], seg, tmp)
                    seg[:, :] = tmp
                for r in range(2):
                    for c in range(2):
                        out[r, c] += coef * seg[r, c]
            i = M - 1
            while i >= 0 and tau[i] == b:
                i -= 1
            if i < 0:
                break
            tau[i] += 1
            for k in range(i + 1, M):
                tau[k] = tau[i]
            if i < dirty:
                dirty = i
    return count


@njit(cache=True, nogil=True)
def _advance(vals, stat, off, binom, VI, WI, O, bath, pairs, npairs, m_bar, dt, L,
             a, cr, N, b, mode, out, counts):
    """Value at key ``(a, cr[:N], b)`` (length >= 1) from already solved keys.

    ``counts`` receives (influence evaluations, kernel calls).  Returns False
    when a dependency is missing.
    """
    counts[0] = 0
    counts[1] = 0
    if mode == STRADDLING:
        for i in range(N):
            if cr[i] == 0:
                out[:, :] = 0.0
                return True
    tmp = np.empty((2, 2), dtype=np.complex128)
    if N > 0 and cr[N - 1] == b:
        idx = off[N - 1] + _key_rank(a, cr, 0, N - 1, b, L, binom)
        if stat[idx] == 0:
            return False
        _mm(VI[abs(b)], vals[idx], tmp)
        s = SQRT_MINUS_I if mode == NEGATIVE else SQRT_I
        out[:, :] = s * tmp
        return True
    m_max = m_bar + 1
    tau = np.empty(m_max, dtype=np.int64)
    pre = np.empty((m_max + 1, 2, 2), dtype=np.complex128)
    ptrs = np.empty(m_max + 1, dtype=np.int64)
    g0 = np.empty((2, 2), dtype=np.complex128)
    k1 = np.zeros((2, 2), dtype=np.complex128)
    k2 = np.empty((2, 2), dtype=np.complex128)
    if mode == POSITIVE and b - 1 == 0:
        # start from the zero-length key at 0 seen from the right
        g0[:, :] = 0.0
        g0[0, 0] = 1.0
        g0[1, 1] = 1.0
        for i in range(N):
            _mm(VI[0], g0, tmp)
            g0[:, :] = SQRT_I * tmp
    else:
        idx = off[N] + _key_rank(a, cr, 0, N, b - 1, L, binom)
        if stat[idx] == 0:
            return False
        left = vals[idx]
        if mode == STRADDLING and b - 1 == 0:
            _mm(O, left, g0)
            n = _kernel(vals, stat, off, binom, WI, O, bath, pairs, npairs, m_bar, dt, L,
                        a, cr, N, 0, PLUS, left, k1, tau, pre, ptrs)
        else:
            g0[:, :] = left
            n = _kernel(vals, stat, off, binom, WI, O, bath, pairs, npairs, m_bar, dt, L,
                        a, cr, N, b - 1, mode, g0, k1, tau, pre, ptrs)
        if n < 0:
            return False
        counts[0] += n
        counts[1] += 1
    pred = g0 + dt * k1
    n = _kernel(vals, stat, off, binom, WI, O, bath, pairs, npairs, m_bar, dt, L,
                a, cr, N, b, mode, pred, k2, tau, pre, ptrs)
    if n < 0:
        return False
    counts[0] += n
    counts[1] += 1
    for r in range(2):
        for c in range(2):
            out[r, c] = g0[r, c] + 0.5 * dt * (k1[r, c] + k2[r, c])
    return True


@njit(cache=True, parallel=True)
def _solve_level(vals, stat, off, binom, VI, WI, O, bath, pairs, npairs, m_bar, dt, L,
                 keys, N, counts):
    """Solve independent keys ``keys[q] = (mode, a, b, c_1..c_N)`` in parallel."""
    nk = keys.shape[0]
    ok = np.ones(nk, dtype=np.bool_)
    for q in prange(nk):
        out = np.empty((2, 2), dtype=np.complex128)
        cnt = np.zeros(2, dtype=np.int64)
        cr = keys[q, 3:].copy()
        mode = keys[q, 0]
        a = keys[q, 1]
        b = keys[q, 2]
        if _advance(vals, stat, off, binom, VI, WI, O, bath, pairs, npairs, m_bar, dt, L,
                    a, cr, N, b, mode, out, cnt):
            idx = off[N] + _key_rank(a, cr, 0, N, b, L, binom)
            vals[idx] = out
            stat[idx] = 1
        else:
            ok[q] = False
        counts[q, 0] = cnt[0]
        counts[q, 1] = cnt[1]
    return ok


@njit(cache=True, parallel=True)
def _expand_shifts(vals, stat, off, binom, units, L, keys, N):
    """Fill every shifted copy of the canonical one-sided keys ``keys[q] = (mode, a, b, c..)``."""
    for q in prange(keys.shape[0]):
        mode = keys[q, 0]
        if mode == STRADDLING:
            continue
        a = keys[q, 1]
        b = keys[q, 2]
        cr = keys[q, 3:].copy()
        src = vals[off[N] + _key_rank(a, cr, 0, N, b, L, binom)].copy()
        tmp = np.empty((2, 2), dtype=np.complex128)
        ud = np.empty((2, 2), dtype=np.complex128)
        moved = np.empty(N, dtype=np.int64)
        for t in range(1, L - (b - a) + 1):
            d = t if mode == POSITIVE else -t
            for i in range(N):
                moved[i] = cr[i] + d
            u = units[t]
            ud[0, 0] = np.conj(u[0, 0])
            ud[0, 1] = np.conj(u[1, 0])
            ud[1, 0] = np.conj(u[0, 1])
            ud[1, 1] = np.conj(u[1, 1])
            _mm(src, ud, tmp)
            idx = off[N] + _key_rank(a + d, moved, 0, N, b + d, L, binom)
            _mm(u, tmp, vals[idx])
            stat[idx] = 1


@njit(cache=True)
def _clear_straddling(stat, off, binom, L, keys, N):
    for q in range(keys.shape[0]):
        if keys[q, 0] == STRADDLING:
            cr = keys[q, 3:].copy()
            stat[off[N] + _key_rank(keys[q, 1], cr, 0, N, keys[q, 2], L, binom)] = 0


@njit(cache=True)
def _count_tuples(lo, hi, n):
    # non-descending tuples of length n in [lo, hi]
    r = hi - lo + 1
    num = 1
    for k in range(n):
        num = num * (r + k) // (k + 1)
    return num


@njit(cache=True)
def _level_keys(L, N, l):
    """Keys with ``N`` crosses and length ``l`` that are integrated directly."""
    total = 0
    if l <= L:
        total += 2 * _count_tuples(0, l, N)
    a_lo = max(-L, -l + 1)
    a_hi = min(-1, L - l)
    if a_hi >= a_lo:
        total += (a_hi - a_lo + 1) * _count_tuples(0, l, N)
    keys = np.empty((total, N + 3), dtype=np.int64)
    q = 0
    c = np.empty(N, dtype=np.int64)
    for kind in range(3):
        if kind < 2:
            if l > L:
                continue
            starts = np.array([-l if kind == NEGATIVE else 0])
        else:
            if a_hi < a_lo:
                continue
            starts = np.arange(a_lo, a_hi + 1)
        for a in starts:
            b = a + l
            for i in range(N):
                c[i] = a
            while True:
                keys[q, 0] = kind
                keys[q, 1] = a
                keys[q, 2] = b
                for i in range(N):
                    keys[q, 3 + i] = c[i]
                q += 1
                i = N - 1
                while i >= 0 and c[i] == b:
                    i -= 1
                if i < 0:
                    break
                c[i] += 1
                for k in range(i + 1, N):
                    c[k] = c[i]
    return keys


@njit(cache=True)
def _fill_zero_length(vals, stat, off, binom, VI, L, N):
    cr = np.empty(N, dtype=np.int64)
    tmp = np.empty((2, 2), dtype=np.complex128)
    for j in range(-L, L + 1):
        g = np.eye(2, dtype=np.complex128)
        s = SQRT_I if j > 0 else SQRT_MINUS_I
        for i in range(N):
            cr[i] = j
            _mm(VI[abs(j)], g, tmp)
            g[:, :] = s * tmp
        idx = off[N] + _key_rank(j, cr, 0, N, j, L, binom)
        vals[idx] = g
        stat[idx] = 1


@njit(cache=True)
def _straddling_trace_table(vals, stat, off, binom, L, l, N, rho, out):
    """``out[r] = tr(rho G(-l, u, l))`` for the r-th colex tuple ``u`` in ``[-l, l]``."""
    x = np.zeros(N, dtype=np.int64)
    cr = np.empty(N, dtype=np.int64)
    R = 2 * l + 1
    for r in range(out.shape[0]):
        for i in range(N):
            cr[i] = x[i] - l
        idx = off[N] + _key_rank(-l, cr, 0, N, l, L, binom)
        if stat[idx] == 0:
            return False
        g = vals[idx]
        out[r] = (rho[0, 0] * g[0, 0] + rho[0, 1] * g[1, 0]
                  + rho[1, 0] * g[0, 1] + rho[1, 1] * g[1, 1])
        _colex_next(x, N, R)
    return True


@njit(inline="always")
def _colex_next(x, n, R):
    i = 0
    while i < n - 1 and x[i] == x[i + 1]:
        i += 1
    if i < n:
        if i == n - 1 and x[i] == R - 1:
            return False
        x[i] += 1
        for k in range(i):
            x[k] = 0
    return True


@njit(cache=True)
def _bare_trace_table(VI, O, l, N, rho, out):
    """ξ=0 closed form of ``tr(rho G(-l, u, l))``: ordered V insertions with O at 0."""
    x = np.zeros(N, dtype=np.int64)
    R = 2 * l + 1
    tmp = np.empty((2, 2), dtype=np.complex128)
    for r in range(out.shape[0]):
        zero = False
        for i in range(N):
            if x[i] == l:
                zero = True
        if zero:
            out[r] = 0.0
        else:
            g = np.eye(2, dtype=np.complex128)
            placed = False
            for i in range(N):
                u = x[i] - l
                if u > 0 and not placed:
                    _mm(O, g, tmp)
                    g[:, :] = tmp
                    placed = True
                _mm(VI[abs(u)], g, tmp)
                g[:, :] = (SQRT_I if u > 0 else SQRT_MINUS_I) * tmp
            if not placed:
                _mm(O, g, tmp)
                g[:, :] = tmp
            out[r] = (rho[0, 0] * g[0, 0] + rho[0, 1] * g[1, 0]
                      + rho[1, 0] * g[0, 1] + rho[1, 1] * g[1, 1])
        _colex_next(x, N, R)


# ---------------------------------------------------------------- Python layer

def _interaction_table(spin: SpinClass, op: np.ndarray, L: int) -> np.ndarray:
    u = spin.unitaries[: L + 1]
    return np.ascontiguousarray(u @ op @ np.conj(np.transpose(u, (0, 2, 1))))


def rho_at(spin: SpinClass, l: int) -> np.ndarray:
    u = spin.unitaries[l]
    return u @ spin.initial_rho @ u.conj().T


def set_threads(threads: int | None) -> int:
    n = max(1, min(int(threads or 1), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


@dataclass
class SolveStats:
    influence_evals: int = 0
    kernel_evals: int = 0
    seconds: float = 0.0


@dataclass(eq=False)
class PropagatorStore:
    """Dense table of solved propagators for one spin class and observable."""

    spin: SpinClass
    n_steps: int
    m_bar: int
    n_bar: int
    vals: np.ndarray
    stat: np.ndarray
    offsets: np.ndarray
    binom: np.ndarray
    frontier: list = field(default_factory=list)
    stats: SolveStats = field(default_factory=SolveStats)
    _traces: dict = field(default_factory=dict, repr=False)

    @classmethod
    def allocate(cls, spin: SpinClass, n_steps: int, m_bar: int, n_bar: int) -> PropagatorStore:
        r = 2 * n_steps + 1
        sizes = [tuple_count(r, n + 2) for n in range(n_bar + 1)]
        offsets = np.zeros(n_bar + 2, dtype=np.int64)
        offsets[1:] = np.cumsum(sizes)
        total = int(offsets[-1])
        binom = binomial_table(r + n_bar + 2, n_bar + 2)
        return cls(spin, n_steps, m_bar, n_bar,
                   vals=np.zeros((total, 2, 2), dtype=np.complex128),
                   stat=np.zeros(total, dtype=np.uint8),
                   offsets=offsets, binom=binom, frontier=[-1] * (n_bar + 1))

    def index(self, s_i: int, crosses, s_f: int) -> int:
        L = self.n_steps
        n = len(crosses)
        if n > self.n_bar:
            raise KeyError(f"{n} crosses exceed n_bar={self.n_bar}")
        xs = [s_i + L, *(c + L for c in crosses), s_f + L]
        if any(x < 0 or x > 2 * L for x in xs) or any(x > y for x, y in zip(xs, xs[1:])):
            raise KeyError(f"malformed key ({s_i}, {tuple(crosses)}, {s_f})")
        return int(self.offsets[n]) + colex_rank(xs)

    def raw(self, s_i: int, crosses, s_f: int) -> np.ndarray:
        """Stored value; left limit (no observable) when ``s_f == 0``."""
        idx = self.index(s_i, crosses, s_f)
        if not self.stat[idx]:
            raise MissingPropagator(f"({s_i}, {tuple(crosses)}, {s_f}) not solved")
        return self.vals[idx].copy()

    def trace_table(self, l: int, initial_state: int = 1) -> list[np.ndarray]:
        """Per cross count N, ``tr(rho_I(l) G(-l, u, l))`` over colex-ranked ``u`` in ``[-l, l]``."""
        if (l, initial_state) in self._traces:
            return self._traces[l, initial_state]
        rho = rho_at(self.spin.with_initial(initial_state), l)
        tables = []
        for n in range(self.n_bar + 1):
            out = np.empty(tuple_count(2 * l + 1, n), dtype=np.complex128)
            if not _straddling_trace_table(self.vals, self.stat, self.offsets, self.binom,
                                           self.n_steps, l, n, rho, out):
                raise MissingPropagator(f"straddling keys at length {2 * l} incomplete")
            tables.append(out)
        self._traces = {k: v for k, v in self._traces.items() if k[0] == l}
        self._traces[l, initial_state] = tables
        return tables


@dataclass(eq=False)
class BareStore:
    """Closed-form propagators for a spin without bath (ξ = 0); no dense table is needed."""

    spin: SpinClass
    n_steps: int
    n_bar: int
    stats: SolveStats = field(default_factory=SolveStats)
    m_bar: int = 1
    _traces: dict = field(default_factory=dict, repr=False)

    def trace_table(self, l: int, initial_state: int = 1) -> list[np.ndarray]:
        if (l, initial_state) in self._traces:
            return self._traces[l, initial_state]
        VI = _interaction_table(self.spin, self.spin.v, self.n_steps)
        rho = rho_at(self.spin.with_initial(initial_state), l)
        tables = []
        for n in range(self.n_bar + 1):
            out = np.empty(tuple_count(2 * l + 1, n), dtype=np.complex128)
            _bare_trace_table(VI, np.ascontiguousarray(self.spin.o_s), l, n, rho, out)
            tables.append(out)
        self._traces = {k: v for k, v in self._traces.items() if k[0] == l}
        self._traces[l, initial_state] = tables
        return tables

    def raw(self, s_i: int, crosses, s_f: int) -> np.ndarray:
        key = CrossKey(s_i, tuple(crosses), s_f)
        g = ID2.copy()
        placed = False
        for c in key.crosses:
            if c == 0 and key.side is Side.STRADDLING:
                return np.zeros((2, 2), dtype=complex)
            if c > 0 and not placed and key.side is Side.STRADDLING:
                g = self.spin.o_s @ g
                placed = True
            u = self.spin.unitaries[abs(c)]
            s = SQRT_I if c > 0 or (c == 0 and key.side is Side.POSITIVE) else SQRT_MINUS_I
            g = s * (u @ self.spin.v @ u.conj().T) @ g
        if key.side is Side.STRADDLING and not placed:
            g = self.spin.o_s @ g
        return g


def get_propagator(store, key: CrossKey) -> np.ndarray:
    """Propagator for any key, rebuilt from its canonical anchor.

    One-sided values are conjugated back from the anchor; the observable is
    left-applied when the key ends exactly at 0 from a negative start.
    """
    spin = store.spin
    if key.s_i == key.s_f:
        value = store.raw(key.s_i, key.crosses, key.s_f)
    else:
        canon, shift, _ = canonicalize(key)
        value = store.raw(canon.s_i, canon.crosses, canon.s_f)
        if shift:
            u = spin.unitaries[shift]
            value = u @ value @ u.conj().T
    if key.s_i < 0 and key.s_f == 0:
        value = spin.o_s @ value
    return value


class _Operators:
    def __init__(self, spin: SpinClass, table: BathTable, m_bar: int):
        L = table.n_steps
        self.VI = _interaction_table(spin, spin.v, L)
        self.WI = _interaction_table(spin, spin.w, L)
        self.O = np.ascontiguousarray(spin.o_s, dtype=np.complex128)
        self.bath = np.ascontiguousarray(table.values, dtype=np.complex128)
        self.pairs, self.npairs = connected_index_array(m_bar)
        self.units = np.ascontiguousarray(spin.unitaries)


def _mode_of(key: CrossKey) -> int:
    return {Side.NEGATIVE: NEGATIVE, Side.POSITIVE: POSITIVE, Side.STRADDLING: STRADDLING}[key.side]


def kernel_K(store: PropagatorStore, table: BathTable, s_i: int, crosses, s_f: int,
             m_bar: int | None = None) -> np.ndarray:
    """Inchworm kernel at a solved key, using stored values for every sub-propagator."""
    m_bar = store.m_bar if m_bar is None else m_bar
    key = CrossKey(s_i, tuple(crosses), s_f)
    ops = _Operators(store.spin, table, m_bar)
    out = np.zeros((2, 2), dtype=np.complex128)
    full = store.raw(s_i, key.crosses, s_f)
    cr = np.array(key.crosses, dtype=np.int64)
    tau = np.empty(m_bar + 1, dtype=np.int64)
    pre = np.empty((m_bar + 2, 2, 2), dtype=np.complex128)
    ptrs = np.empty(m_bar + 2, dtype=np.int64)
    n = _kernel(store.vals, store.stat, store.offsets, store.binom, ops.WI, ops.O, ops.bath,
                ops.pairs, ops.npairs, m_bar, table.dt, store.n_steps,
                s_i, cr, len(cr), s_f, _mode_of(key), full, out, tau, pre, ptrs)
    if n < 0:
        raise MissingPropagator(f"kernel at ({s_i}, {key.crosses}, {s_f}) lacks a dependency")
    COUNTER.add(influence=n, kernel=1)
    return out


def heun_extend(store: PropagatorStore, table: BathTable, s_i: int, crosses, s_f: int,
                m_bar: int | None = None) -> np.ndarray:
    """One Heun step from the solved key ``(s_i, crosses, s_f)`` to ``s_f + 1``.

    The result is returned without being stored; when the step starts at
    ``s_f = 0`` from a negative start the observable jump is applied first.
    """
    m_bar = store.m_bar if m_bar is None else m_bar
    key = CrossKey(s_i, tuple(crosses), s_f + 1)
    if key.crosses and key.crosses[-1] > s_f:
        raise ValueError("crosses must not exceed the starting endpoint")
    ops = _Operators(store.spin, table, m_bar)
    out = np.empty((2, 2), dtype=np.complex128)
    counts = np.zeros(2, dtype=np.int64)
    cr = np.array(key.crosses, dtype=np.int64)
    mode = _mode_of(key)
    ok = _advance(store.vals, store.stat, store.offsets, store.binom, ops.VI, ops.WI, ops.O,
                  ops.bath, ops.pairs, ops.npairs, m_bar, table.dt, store.n_steps,
                  s_i, cr, len(cr), s_f + 1, mode, out, counts)
    if not ok:
        raise MissingPropagator(f"step from ({s_i}, {key.crosses}, {s_f}) lacks a dependency")
    COUNTER.add(influence=int(counts[0]), kernel=int(counts[1]))
    return out


def solve_all(spin: SpinClass, table: BathTable, m_bar: int, n_bar: int,
              threads: int | None = None, progress=None,
              base: PropagatorStore | None = None) -> PropagatorStore:
    """Solve every canonical and straddling key with at most ``n_bar`` crosses on ``[-L, L]``.

    One-sided keys never see the observable, so with ``base`` (a store for the
    same spin physics, bath and truncation) they are copied and only the
    straddling keys are integrated.
    """
    if not commutes_with_sigma_z(spin.o_s, 1e-14):
        warnings.warn("observable does not commute with sigma_z; nodes at t=0 are dropped "
                      "under an assumption that then fails", stacklevel=2)
    set_threads(threads)
    L = table.n_steps
    start = time.perf_counter()
    store = PropagatorStore.allocate(spin, L, m_bar, n_bar)
    if base is not None:
        if (base.n_steps, base.m_bar, base.n_bar) != (L, m_bar, n_bar):
            raise ValueError("base store was solved with a different grid or truncation")
        store.vals[:] = base.vals
        store.stat[:] = base.stat
        for n in range(n_bar + 1):
            for l in range(2, 2 * L + 1):
                _clear_straddling(store.stat, store.offsets, store.binom, L,
                                  _level_keys(L, n, l), n)
    ops = _Operators(spin, table, m_bar)
    args = (store.vals, store.stat, store.offsets, store.binom)
    for n in range(n_bar + 1):
        if base is None:
            _fill_zero_length(*args, ops.VI, L, n)
        for l in range(1, 2 * L + 1):
            keys = _level_keys(L, n, l)
            if base is not None:
                keys = keys[keys[:, 0] == STRADDLING]
            if len(keys) == 0:
                continue
            counts = np.zeros((len(keys), 2), dtype=np.int64)
            ok = _solve_level(*args, ops.VI, ops.WI, ops.O, ops.bath, ops.pairs, ops.npairs,
                              m_bar, table.dt, L, keys, n, counts)
            if not ok.all():
                bad = keys[np.argmin(ok)]
                raise MissingPropagator(f"dependency missing while solving key {bad.tolist()}")
            if base is None:
                _expand_shifts(*args, ops.units, L, keys, n)
            influence = int(counts[:, 0].sum())
            kernels = int(counts[:, 1].sum())
            store.stats.influence_evals += influence
            store.stats.kernel_evals += kernels
            COUNTER.add(influence=influence, kernel=kernels)
            store.frontier[n] = l
            if progress is not None:
                progress(n, l)
    store.stats.seconds = time.perf_counter() - start
    return store


def make_store(spin: SpinClass, table: BathTable, m_bar: int, n_bar: int,
               threads: int | None = None, progress=None, base=None):
    """Dense inchworm store, or the closed-form store when the bath is switched off."""
    if table.is_zero:
        return BareStore(spin, table.n_steps, n_bar, m_bar=m_bar)
    if not isinstance(base, PropagatorStore):
        base = None
    return solve_all(spin, table, m_bar, n_bar, threads, progress, base)


# ---------------------------------------------------------------- checkpoints

def spin_fingerprint(spin: SpinClass) -> str:
    parts = np.concatenate([spin.h_s.ravel(), spin.v.ravel(), spin.o_s.ravel()])
    return parts.tobytes().hex()


def save_checkpoint(store: PropagatorStore, path: str | Path, dt: float) -> None:
    header = json.dumps({
        "n_steps": store.n_steps, "dt": dt, "m_bar": store.m_bar, "n_bar": store.n_bar,
        "spin": spin_fingerprint(store.spin), "entries": int(store.offsets[-1]),
        "influence_evals": store.stats.influence_evals, "kernel_evals": store.stats.kernel_evals,
    }).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(store.stat.tobytes())
        fh.write(store.vals.tobytes())


def load_checkpoint(path: str | Path, spin: SpinClass, dt: float, m_bar: int,
                    n_bar: int) -> PropagatorStore | None:
    """Store from ``path`` if it matches the requested run, else ``None``."""
    path = Path(path)
    if not path.exists():
        return None
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a propagator checkpoint")
        version, size = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {version} unsupported")
        header = json.loads(fh.read(size))
        wanted = {"n_steps": spin.grid.n_steps, "dt": dt, "m_bar": m_bar, "n_bar": n_bar,
                  "spin": spin_fingerprint(spin)}
        if any(header[k] != v for k, v in wanted.items()):
            return None
        store = PropagatorStore.allocate(spin, header["n_steps"], m_bar, n_bar)
        n = header["entries"]
        store.stat[:] = np.frombuffer(fh.read(n), dtype=np.uint8)
        store.vals[:] = np.frombuffer(fh.read(n * 64), dtype=np.complex128).reshape(n, 2, 2)
    store.stats.influence_evals = header["influence_evals"]
    store.stats.kernel_evals = header["kernel_evals"]
    store.frontier = [2 * store.n_steps] * (n_bar + 1)
    return store
