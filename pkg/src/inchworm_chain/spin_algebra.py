"""Exact 2x2 operator algebra for a single spin: Hamiltonian, interaction picture, traces, shifts."""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field

import numpy as np

from .config import SpinParams, TimeGrid

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
ID2 = np.eye(2, dtype=complex)

# principal branch: sqrt(i) = e^{i pi/4}, sqrt(-i) = e^{-i pi/4}
SQRT_I = cmath.exp(0.25j * math.pi)
SQRT_MINUS_I = cmath.exp(-0.25j * math.pi)

FORWARD = "forward"
BACKWARD = "backward"


def sqrt_i_sgn(sign: int) -> complex:
    return SQRT_I if sign > 0 else SQRT_MINUS_I


def hamiltonian(epsilon: float, delta: float) -> np.ndarray:
    return epsilon * SIGMA_Z + delta * SIGMA_X


def _expm_traceless(h: np.ndarray, t: float) -> np.ndarray:
    # H^2 = w^2 Id for traceless Hermitian H
    w = math.sqrt(max(0.0, (h @ h)[0, 0].real))
    if w == 0.0:
        return ID2.copy()
    return math.cos(w * t) * ID2 - 1j * math.sin(w * t) * h / w


def projector(state: int) -> np.ndarray:
    return np.diag([1.0, 0.0]).astype(complex) if state == 1 else np.diag([0.0, 1.0]).astype(complex)


@dataclass(frozen=True, eq=False)
class SpinClass:
    """One spin's operators plus the cached propagators ``exp(-i H j dt)``, ``j = 0..2 n_steps``."""

    h_s: np.ndarray
    v: np.ndarray
    w: np.ndarray
    o_s: np.ndarray
    initial_rho: np.ndarray
    grid: TimeGrid
    unitaries: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, params: SpinParams, grid: TimeGrid) -> SpinClass:
        h = hamiltonian(params.epsilon, params.delta)
        # closed form per step count rather than repeated products: no drift with j
        units = np.stack([_expm_traceless(h, j * grid.dt) for j in range(2 * grid.n_steps + 1)])
        return cls(h_s=h, v=params.J * SIGMA_Z, w=SIGMA_Z.copy(),
                   o_s=params.observable_matrix, initial_rho=projector(params.initial_state),
                   grid=grid, unitaries=units)

    def with_observable(self, o_s: np.ndarray) -> SpinClass:
        return SpinClass(self.h_s, self.v, self.w, np.asarray(o_s, dtype=complex),
                         self.initial_rho, self.grid, self.unitaries)

    def with_initial(self, state: int) -> SpinClass:
        return SpinClass(self.h_s, self.v, self.w, self.o_s, projector(state),
                         self.grid, self.unitaries)

    def unitary(self, j: int) -> np.ndarray:
        if not 0 <= j < len(self.unitaries):
            raise ValueError(f"no cached propagator for {j} steps")
        return self.unitaries[j]


def expm_hs(spin: SpinClass, t: float) -> np.ndarray:
    """``exp(-i H_s t)`` from the closed form for a traceless Hermitian 2x2 matrix."""
    if not math.isfinite(t):
        raise ValueError("t must be finite")
    return _expm_traceless(spin.h_s, t)


def interaction_picture(spin: SpinClass, a: np.ndarray, tau: float) -> np.ndarray:
    u = spin.unitary(abs(spin.grid.index(tau)))
    return u @ a @ u.conj().T


def rho_sI(spin: SpinClass, t: float) -> np.ndarray:
    j = spin.grid.index(t)
    if j < 0:
        raise ValueError("rho is only evolved to non-negative times")
    u = spin.unitary(j)
    return u @ spin.initial_rho @ u.conj().T


def trace_with(rho: np.ndarray, a: np.ndarray) -> complex:
    return complex(np.einsum("ij,ji->", rho, a))


def shift_conjugate(spin: SpinClass, a: np.ndarray, T: float, direction: str = FORWARD) -> np.ndarray:
    """``U a U^dagger`` with ``U = exp(-i H_s T)`` (forward) or its inverse (backward)."""
    j = spin.grid.index(T)
    if j <= 0:
        raise ValueError("shift must be a positive grid multiple")
    u = spin.unitary(j)
    if direction == FORWARD:
        return u @ a @ u.conj().T
    if direction == BACKWARD:
        return u.conj().T @ a @ u
    raise ValueError(f"unknown direction {direction!r}")


def commutes_with_sigma_z(a: np.ndarray, tol: float = 0.0) -> bool:
    return bool(np.max(np.abs(a @ SIGMA_Z - SIGMA_Z @ a)) <= tol)
