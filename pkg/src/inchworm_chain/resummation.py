"""Chain observables from single-spin traces via spin-by-spin summation over shared crosses.

Cross tuples at output time ``l`` live on ``[-l, l]`` and are stored in local
coordinates ``x = s + l`` in ``[0, 2l]``, ranked colexicographically per
length.  ``tables[N][rank]`` holds ``tr(rho_I(l) G(-l, s, l))`` for one spin.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit, prange

from .bath import table_for
from .config import IDENTITY, SIGMA_Z, ChainConfig, spin_classes
from .inchworm import (BareStore, CrossKey, PropagatorStore, binomial_table, get_propagator,
                       load_checkpoint, make_store, rho_at, save_checkpoint, set_threads,
                       tuple_count)
from .spin_algebra import SpinClass, trace_with

# engine-side quadrature multiplier; only the CLI's negative-control hook changes it
_WEIGHT_SCALE = 1.0


@dataclass
class AmplitudeMap:
    """``values[N][rank]`` = amplitude of the level-``level`` partial chain for each cross tuple."""

    level: int
    l: int
    values: list[np.ndarray]

    def as_dict(self) -> dict[tuple[int, ...], complex]:
        out = {}
        for n, arr in enumerate(self.values):
            for r, xs in enumerate(iter_tuples(2 * self.l + 1, n)):
                out[tuple(x - self.l for x in xs)] = complex(arr[r])
        return out


@dataclass
class ChainResult:
    dt: float
    targets: list[int]
    values: np.ndarray  # shape (n_steps, len(targets)), rows l = 1..n_steps
    solve_seconds: float = 0.0
    resum_seconds: float = 0.0
    influence_evals: int = 0
    kernel_evals: int = 0
    stores_solved: int = 0
    memory_bytes: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(1, self.values.shape[0] + 1)

    def column(self, target: int) -> np.ndarray:
        return self.values[:, self.targets.index(target)]

    @property
    def max_imag(self) -> float:
        return float(np.max(np.abs(self.values.imag))) if self.values.size else 0.0


def iter_tuples(values: int, length: int):
    """Non-descending tuples over ``range(values)`` in colex rank order."""
    if length == 0:
        yield ()
        return
    x = [0] * length
    while True:
        yield tuple(x)
        i = 0
        while i < length - 1 and x[i] == x[i + 1]:
            i += 1
        if i == length - 1 and x[i] == values - 1:
            return
        x[i] += 1
        for k in range(i):
            x[k] = 0


def simplex_weight(xs, hi: int, dt: float) -> float:
    """Iterated trapezoid weight of the tuple ``xs`` on ``0 <= x_1 <= .. <= x_n <= hi``."""
    w = 1.0
    top = hi
    for x in reversed(xs):
        if top == 0:
            return 0.0
        w *= 0.5 * dt if x == 0 or x == top else dt
        top = x
    return w


# ---------------------------------------------------------------- numba core

@njit(inline="always")
def _weight(x, n, hi, dt, scale):
    w = 1.0
    top = hi
    for i in range(n - 1, -1, -1):
        if top == 0:
            return 0.0
        if x[i] == 0 or x[i] == top:
            w *= 0.5 * dt * scale
        else:
            w *= dt * scale
        top = x[i]
    return w


@njit(inline="always")
def _next(x, n, R):
    i = 0
    while i < n - 1 and x[i] == x[i + 1]:
        i += 1
    if n == 0 or (i == n - 1 and x[i] == R - 1):
        return False
    x[i] += 1
    for k in range(i):
        x[k] = 0
    return True


@njit(inline="always")
def _unrank(r, n, binom, x):
    for k in range(n - 1, -1, -1):
        y = k
        while binom[y + 1, k + 1] <= r:
            y += 1
        r -= binom[y, k + 1]
        x[k] = y - k


@njit(inline="always")
def _merged_rank(s, n, t, m, binom):
    i = 0
    j = 0
    r = 0
    for k in range(n + m):
        if j >= m or (i < n and s[i] <= t[j]):
            v = s[i]
            i += 1
        else:
            v = t[j]
            j += 1
        r += binom[v + k, k + 1]
    return r


@njit(cache=True)
def _weighted(prev, prev_off, n_bar, R, dt, scale):
    out = np.empty_like(prev)
    t = np.zeros(max(n_bar, 1), dtype=np.int64)
    for m in range(n_bar + 1):
        for k in range(m):
            t[k] = 0
        rp = 0
        while True:
            out[prev_off[m] + rp] = _weight(t, m, R - 1, dt, scale) * prev[prev_off[m] + rp]
            rp += 1
            if not _next(t, m, R):
                break
    return out


@njit(cache=True, parallel=True)
def _add_spin(aw, prev_off, table, table_off, out, n_bar, R, binom, chunk):
    """``out[N][s] = sum_{N'} sum_{s'} aw[N'][s'] table[N+N'][merge(s, s')]``.

    ``aw`` already carries the simplex weights of ``s'``.
    """
    mid = (R - 1) // 2
    for n in range(n_bar + 1):
        size = prev_off[n + 1] - prev_off[n]
        nchunks = (size + chunk - 1) // chunk
        for c in prange(nchunks):
            s = np.zeros(max(n, 1), dtype=np.int64)
            t = np.zeros(max(n_bar, 1), dtype=np.int64)
            r0 = c * chunk
            r1 = min(size, r0 + chunk)
            _unrank(r0, n, binom, s)
            for r in range(r0, r1):
                acc = 0.0 + 0.0j
                # a cross at t = 0 makes every merged trace vanish
                skip = False
                for i in range(n):
                    if s[i] == mid:
                        skip = True
                if not skip:
                    for m in range(n_bar - n + 1):
                        base = table_off[n + m]
                        start = prev_off[m]
                        for k in range(m):
                            t[k] = 0
                        rp = 0
                        while True:
                            a = aw[start + rp]
                            if a != 0:
                                acc += a * table[base + _merged_rank(s, n, t, m, binom)]
                            rp += 1
                            if not _next(t, m, R):
                                break
                out[prev_off[n] + r] = acc
                _next(s, n, R)


@njit(cache=True)
def _close(prev, prev_off, table, n_bar, R, dt, scale):
    hi = R - 1
    acc = 0.0 + 0.0j
    t = np.zeros(max(n_bar, 1), dtype=np.int64)
    for m in range(n_bar + 1):
        for k in range(m):
            t[k] = 0
        rp = 0
        while True:
            a = prev[prev_off[m] + rp]
            if a != 0:
                acc += (_weight(t, m, hi, dt, scale) * a) * table[prev_off[m] + rp]
            rp += 1
            if not _next(t, m, R):
                break
    return acc


# ---------------------------------------------------------------- Python layer

def _flatten(arrays: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    off = np.zeros(len(arrays) + 1, dtype=np.int64)
    off[1:] = np.cumsum([len(a) for a in arrays])
    return np.concatenate(arrays).astype(np.complex128), off


def _split(flat: np.ndarray, off: np.ndarray) -> list[np.ndarray]:
    return [flat[off[n]:off[n + 1]] for n in range(len(off) - 1)]


def spin_trace(store, crosses, l: int, initial_state: int | None = None) -> complex:
    """``tr(rho_I(l dt) G(-l, crosses, l))`` for one spin."""
    spin = store.spin if initial_state is None else store.spin.with_initial(initial_state)
    g = get_propagator(store, CrossKey(-l, tuple(crosses), l))
    return trace_with(rho_at(spin, l), g)


def first_spin(table: list[np.ndarray], l: int) -> AmplitudeMap:
    return AmplitudeMap(1, l, [np.array(t, dtype=np.complex128) for t in table])


def add_spin(prev: AmplitudeMap, table: list[np.ndarray], dt: float) -> AmplitudeMap:
    """Attach one more spin: integrate out the crosses shared with the previous level."""
    n_bar = len(prev.values) - 1
    R = 2 * prev.l + 1
    flat, off = _flatten(prev.values)
    tflat, toff = _flatten(table)
    out = np.empty_like(flat)
    binom = binomial_table(R + 2 * n_bar + 1, n_bar + 1)
    chunk = max(1, min(4096, int(off[-1]) // 64 + 1))
    aw = _weighted(flat, off, n_bar, R, dt, _WEIGHT_SCALE)
    _add_spin(aw, off, tflat, toff, out, n_bar, R, binom, chunk)
    return AmplitudeMap(prev.level + 1, prev.l, _split(out, off))


def close_chain(prev: AmplitudeMap, table: list[np.ndarray], dt: float) -> complex:
    n_bar = len(prev.values) - 1
    flat, off = _flatten(prev.values)
    tflat, _ = _flatten(table[: n_bar + 1])
    return complex(_close(flat, off, tflat, n_bar, 2 * prev.l + 1, dt, _WEIGHT_SCALE))


def chain_value(tables: list[list[np.ndarray]], l: int, dt: float,
                keys: list | None = None, memo: dict | None = None) -> complex:
    """Observable at ``t = l dt`` from per-spin trace tables ordered along the chain.

    With ``keys`` (one hashable identity per table) and a ``memo`` dict, the
    amplitude of the longest previously saved matching prefix is reused and
    the prefix ending just before ``memo["share_upto"]`` is saved.
    """
    K = len(tables)
    if K == 1:
        return complex(tables[0][0][0])
    amp, done = None, 0
    if memo is not None and keys is not None:
        saved = memo.get("prefix")
        if saved is not None and saved[0] == (l, tuple(keys[:len(saved[0][1])])):
            amp, done = saved[1], len(saved[0][1])
    if amp is None:
        amp, done = first_spin(tables[0], l), 1
    share = memo.get("share_upto") if memo is not None else None
    for k in range(done, K - 1):
        if keys is not None and share is not None and k == share and k >= 2:
            memo["prefix"] = ((l, tuple(keys[:k])), amp)
        amp = add_spin(amp, tables[k], dt)
    if keys is not None and share is not None and share == K - 1 and share >= 2:
        memo["prefix"] = ((l, tuple(keys[:share])), amp)
    return close_chain(amp, tables[-1], dt)


class StoreCache:
    """Solved stores keyed by spin class and observable; one-sided keys are shared.

    With ``checkpoint_dir`` dense stores are loaded from and saved to that directory.
    """

    def __init__(self, cfg: ChainConfig, threads: int | None = None, progress=None,
                 checkpoint_dir: str | Path | None = None):
        self.cfg = cfg
        self.threads = threads
        self.progress = progress
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.class_of = {}
        for c, members in enumerate(spin_classes(cfg)):
            for k in members:
                self.class_of[k] = c
        self._stores = {}
        self._tables = {}
        self.solve_seconds = 0.0
        self.solved = 0
        self.loaded = 0

    def _checkpoint_path(self, c: int, observable: tuple) -> Path:
        tag = "z" if observable == SIGMA_Z else "id" if observable == IDENTITY else (
            np.array(observable, dtype=complex).tobytes().hex()[:16])
        return self.checkpoint_dir / f"store-class{c}-{tag}.ckpt"

    def store(self, k: int, observable: tuple):
        c = self.class_of[k]
        key = (c, tuple(observable))
        if key in self._stores:
            return self._stores[key]
        spin_params, bath = self.cfg.spins[k]
        n = self.cfg.numerics
        spin = SpinClass.build(spin_params, self.cfg.grid).with_observable(
            np.array(observable, dtype=complex).reshape(2, 2))
        if c not in self._tables:
            self._tables[c] = table_for(bath, self.cfg.grid)
        table = self._tables[c]
        path = self._checkpoint_path(c, key[1]) if self.checkpoint_dir else None
        store = None
        if path is not None and not table.is_zero:
            store = load_checkpoint(path, spin, n.dt, n.m_bar, n.n_bar)
            self.loaded += store is not None
        if store is None:
            base = next((s for (cc, _), s in self._stores.items() if cc == c), None)
            t0 = time.perf_counter()
            store = make_store(spin, table, n.m_bar, n.n_bar, self.threads, self.progress, base)
            self.solve_seconds += time.perf_counter() - t0
            self.solved += 1
            if path is not None and isinstance(store, PropagatorStore):
                path.parent.mkdir(parents=True, exist_ok=True)
                save_checkpoint(store, path, n.dt)
        self._stores[key] = store
        return store

    @property
    def stores(self):
        return list(self._stores.values())


def run_chain(cfg: ChainConfig, targets=None, threads: int | None = None,
              cache: StoreCache | None = None, progress=None) -> ChainResult:
    """Expectation of sigma_z on each target spin for ``t = dt .. n_steps dt``.

    ``targets=None`` uses the spins' configured observables as given (one column).
    """
    set_threads(threads if threads is not None else cfg.numerics.threads)
    cache = cache or StoreCache(cfg, threads, progress)
    n = cfg.numerics
    if targets is None:
        plans = [(cfg.observable_spin, [sp.observable for sp, _ in cfg.spins])]
    else:
        plans = [(t, [SIGMA_Z if k == t else IDENTITY for k in range(cfg.n_spins)])
                 for t in sorted(targets)]
    for _, obs in plans:
        for k in range(cfg.n_spins):
            cache.store(k, obs[k])
    values = np.zeros((n.n_steps, len(plans)), dtype=np.complex128)
    states = [sp.initial_state for sp, _ in cfg.spins]
    t0 = time.perf_counter()
    for l in range(1, n.n_steps + 1):
        memo: dict = {}
        for j, (target, obs) in enumerate(plans):
            stores = [cache.store(k, obs[k]) for k in range(cfg.n_spins)]
            tables = [st.trace_table(l, states[k]) for k, st in enumerate(stores)]
            keys = [(id(st), states[k]) for k, st in enumerate(stores)]
            # later targets share every spin before this one
            memo["share_upto"] = target if j + 1 < len(plans) else None
            values[l - 1, j] = chain_value(tables, l, n.dt, keys, memo)
    resum = time.perf_counter() - t0
    influence = sum(s.stats.influence_evals for s in cache.stores)
    kernels = sum(s.stats.kernel_evals for s in cache.stores)
    memory = sum(s.vals.nbytes + s.stat.nbytes for s in cache.stores if not isinstance(s, BareStore))
    return ChainResult(dt=n.dt, targets=[t for t, _ in plans], values=values,
                       solve_seconds=cache.solve_seconds, resum_seconds=resum,
                       influence_evals=influence, kernel_evals=kernels,
                       stores_solved=cache.solved, memory_bytes=memory)


def write_csv(result: ChainResult, path: str | Path) -> None:
    """Rows ``t,spin,re,im`` with 1-based spin labels and 17 significant digits."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "spin", "re", "im"])
        for i, t in enumerate(result.times):
            for j, target in enumerate(result.targets):
                z = result.values[i, j]
                writer.writerow([f"{t:.17g}", target + 1, f"{z.real:.17g}", f"{z.imag:.17g}"])


def read_csv(path: str | Path) -> dict[int, np.ndarray]:
    rows: dict[int, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(int(row["spin"]), []).append(
                (float(row["t"]), complex(float(row["re"]), float(row["im"]))))
    return {k: np.array(v) for k, v in rows.items()}


def write_plot_script(csv_path: str | Path, script_path: str | Path, spins) -> None:
    csv_name = Path(csv_path).name
    lines = [
        "set datafile separator ','",
        "set key autotitle columnhead",
        "set xlabel 't'",
        "set ylabel '<sigma_z(t)>'",
        "set terminal pngcairo size 800,500",
        f"set output '{Path(csv_name).stem}-gnuplot.png'",
    ]
    plots = [f"'{csv_name}' using 1:($2=={k + 1} ? $3 : 1/0) with linespoints title 'spin {k + 1}'"
             for k in spins]
    lines.append("plot " + ", \\\n     ".join(plots))
    Path(script_path).write_text("\n".join(lines) + "\n")


def pairs_per_level(l: int, n_bar: int) -> int:
    """Inner terms of one ``add_spin`` call at output time ``l``."""
    R = 2 * l + 1
    return sum(tuple_count(R, n) * tuple_count(R, m)
               for n in range(n_bar + 1) for m in range(n_bar - n + 1))


__all__ = ["AmplitudeMap", "ChainResult", "StoreCache", "add_spin", "chain_value",
           "close_chain", "first_spin", "iter_tuples", "run_chain", "simplex_weight",
           "spin_trace", "write_csv", "write_plot_script"]
