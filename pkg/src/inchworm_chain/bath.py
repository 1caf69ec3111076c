"""Ohmic harmonic baths: oscillator discretisation and two-point correlation tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import BathParams, TimeGrid


@dataclass(frozen=True)
class BathSpectrum:
    omegas: np.ndarray
    couplings: np.ndarray

    def __len__(self) -> int:
        return len(self.omegas)


@dataclass(frozen=True)
class BathTable:
    """``values[j]`` holds the correlation at lag ``j * dt`` for ``j = 0 .. 2 * n_steps``."""

    values: np.ndarray
    dt: float
    n_steps: int

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values)


def discretize_ohmic(bath: BathParams) -> BathSpectrum:
    """Place ``bath.n_osc`` oscillators so that they sample the Ohmic density.

    Frequencies follow ``omega_l = -omega_c * log(1 - (l/L) * (1 - exp(-omega_max/omega_c)))``
    and couplings ``c_l = omega_l * sqrt(xi * omega_c * (1 - exp(-omega_max/omega_c)) / L)``.
    """
    n = bath.n_osc
    x = bath.omega_max / bath.omega_c
    span = -np.expm1(-x)
    frac = np.arange(1, n + 1, dtype=float) / n
    # 1 - frac*span loses all digits near frac = 1 when exp(-x) is tiny; the
    # equivalent (1 - frac) + frac*exp(-x) has no cancellation there
    small = frac * span < 0.5
    logs = np.empty(n)
    logs[small] = np.log1p(-frac[small] * span)
    logs[~small] = np.log((1.0 - frac[~small]) + frac[~small] * np.exp(-x))
    omegas = -bath.omega_c * logs
    couplings = omegas * np.sqrt(bath.xi * bath.omega_c * span / n)
    return BathSpectrum(omegas=omegas, couplings=couplings)


def _coth_half(beta: float, omegas: np.ndarray) -> np.ndarray:
    # coth(x/2) = 1 + 2 / (exp(x) - 1); stays finite for large beta*omega
    with np.errstate(over="ignore"):
        return 1.0 + 2.0 / np.expm1(beta * omegas)


def correlation_values(spectrum: BathSpectrum, beta: float, lags: np.ndarray) -> np.ndarray:
    lags = np.asarray(lags, dtype=float)
    w = spectrum.omegas
    amp = spectrum.couplings ** 2 / (2.0 * w)
    phase = np.multiply.outer(lags, w)
    return (np.cos(phase) * (amp * _coth_half(beta, w))).sum(axis=-1) - 1j * (np.sin(phase) * amp).sum(axis=-1)


def correlation_value(spectrum: BathSpectrum, beta: float, lag: float) -> complex:
    """Sum over oscillators of ``c^2/(2 w) * (coth(beta w / 2) cos(w lag) - i sin(w lag))``."""
    if not np.isfinite(lag):
        raise ValueError("lag must be finite")
    return complex(correlation_values(spectrum, beta, np.array([lag]))[0])


def build_table(spectrum: BathSpectrum, beta: float, grid: TimeGrid) -> BathTable:
    lags = np.arange(2 * grid.n_steps + 1) * grid.dt
    values = correlation_values(spectrum, beta, lags)
    values[0] = values[0].real
    return BathTable(values=values, dt=grid.dt, n_steps=grid.n_steps)


def table_for(bath: BathParams, grid: TimeGrid) -> BathTable:
    return build_table(discretize_ohmic(bath), bath.beta, grid)


def lag_value(table: BathTable, lag_index: int) -> complex:
    if lag_index >= 0:
        return complex(table.values[lag_index])
    return complex(np.conj(table.values[-lag_index]))


def b_lookup(table: BathTable, tau_a: float, tau_b: float) -> complex:
    """Correlation between insertions at contour times ``tau_a`` and ``tau_b``.

    The bath only sees ``|tau|`` on the unfolded contour, so the lag is
    ``|tau_a| - |tau_b|``; negative lags use the conjugate of the stored value.
    """
    grid = TimeGrid(table.dt, table.n_steps)
    ja, jb = grid.index(tau_a), grid.index(tau_b)
    if abs(ja) > table.n_steps or abs(jb) > table.n_steps:
        raise ValueError("contour time outside the tabulated range")
    return lag_value(table, abs(ja) - abs(jb))


def dump_table_csv(table: BathTable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lag", "re", "im"])
        for j, v in enumerate(table.values):
            writer.writerow([f"{j * table.dt:.17g}", f"{v.real:.17g}", f"{v.imag:.17g}"])
