"""Physical and numerical parameters for a bath-coupled Ising chain.

Configs are JSON files of the form::

    {"numerics": {"dt": 0.2, "n_steps": 25, "m_bar": 3, "n_bar": 4, "threads": 8},
     "observable_spin": 0,
     "spins": [{"epsilon": 1.0, "delta": 1.0, "J": 0.2, "initial": 1,
                "bath": {"xi": 0.2, "beta": 5.0, "omega_c": 2.5,
                         "omega_max_factor": 4.0, "n_osc": 400}}, ...]}

``"spins_uniform": {...}`` together with ``"count": K`` replaces the explicit list.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

IDENTITY = (1 + 0j, 0j, 0j, 1 + 0j)
SIGMA_Z = (1 + 0j, 0j, 0j, -1 + 0j)

DEFAULT_N_OSC = 400
MAX_M_BAR = 11


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class SpinParams:
    epsilon: float
    delta: float
    J: float
    initial_state: int = 1
    observable: tuple[complex, complex, complex, complex] = IDENTITY

    @property
    def observable_matrix(self) -> np.ndarray:
        return np.array(self.observable, dtype=complex).reshape(2, 2)

    def physical_key(self) -> tuple[float, float, float]:
        return (self.epsilon, self.delta, self.J)


@dataclass(frozen=True)
class BathParams:
    xi: float
    beta: float
    omega_c: float
    omega_max: float
    n_osc: int = DEFAULT_N_OSC


@dataclass(frozen=True)
class NumericsParams:
    dt: float
    n_steps: int
    m_bar: int = 3
    n_bar: int = 2
    threads: int = 1


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``j * dt`` for ``j`` in ``[-n_steps, n_steps]``."""

    dt: float
    n_steps: int

    def time(self, j: int) -> float:
        if abs(j) > self.n_steps:
            raise IndexError(f"grid index {j} outside [-{self.n_steps}, {self.n_steps}]")
        return j * self.dt

    def index(self, t: float) -> int:
        """Grid index of time ``t``; raises ``ValueError`` for off-grid times."""
        j = int(round(t / self.dt))
        if abs(t - j * self.dt) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t!r} is not on the grid with dt={self.dt!r}")
        return j

    @property
    def indices(self) -> range:
        return range(-self.n_steps, self.n_steps + 1)


@dataclass(frozen=True)
class ChainConfig:
    spins: tuple[tuple[SpinParams, BathParams], ...]
    numerics: NumericsParams
    observable_spin: int = 0
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def n_spins(self) -> int:
        return len(self.spins)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.numerics.dt, self.numerics.n_steps)

    def with_target(self, target: int) -> ChainConfig:
        """Copy observing sigma_z on ``target`` and the identity on every other spin."""
        if not 0 <= target < self.n_spins:
            raise ConfigError("observable_spin", f"target {target} outside chain of {self.n_spins}")
        spins = tuple(
            (replace(sp, observable=SIGMA_Z if k == target else IDENTITY), bath)
            for k, (sp, bath) in enumerate(self.spins)
        )
        return replace(self, spins=spins, observable_spin=target)

    def with_numerics(self, **changes: Any) -> ChainConfig:
        cfg = replace(self, numerics=replace(self.numerics, **changes))
        validate(cfg)
        return cfg


def _number(obj: dict, key: str, path: str, default: Any = None) -> float:
    if key not in obj:
        if default is None:
            raise ConfigError(f"{path}.{key}", "missing")
        return default
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}.{key}", f"expected a number, got {value!r}")
    if not math.isfinite(value):
        raise ConfigError(f"{path}.{key}", "must be finite")
    return value


def _integer(obj: dict, key: str, path: str, default: Any = None) -> int:
    value = _number(obj, key, path, default)
    if int(value) != value:
        raise ConfigError(f"{path}.{key}", f"expected an integer, got {value!r}")
    return int(value)


def _parse_observable(raw: Any, path: str) -> tuple[complex, ...]:
    try:
        mat = [[complex(*e) if isinstance(e, (list, tuple)) else complex(e) for e in row] for row in raw]
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, f"cannot parse 2x2 matrix: {exc}") from None
    if len(mat) != 2 or any(len(row) != 2 for row in mat):
        raise ConfigError(path, "observable must be a 2x2 matrix")
    flat = tuple(mat[0] + mat[1])
    if not all(math.isfinite(z.real) and math.isfinite(z.imag) for z in flat):
        raise ConfigError(path, "observable entries must be finite")
    return flat


def _parse_bath(obj: Any, path: str) -> BathParams:
    if not isinstance(obj, dict):
        raise ConfigError(path, "expected an object")
    omega_c = _number(obj, "omega_c", path)
    if "omega_max" in obj:
        omega_max = _number(obj, "omega_max", path)
    else:
        omega_max = _number(obj, "omega_max_factor", path) * omega_c
    return BathParams(
        xi=_number(obj, "xi", path),
        beta=_number(obj, "beta", path),
        omega_c=omega_c,
        omega_max=omega_max,
        n_osc=_integer(obj, "n_osc", path, DEFAULT_N_OSC),
    )


def _parse_spin(obj: Any, path: str, observed: bool) -> tuple[SpinParams, BathParams]:
    if not isinstance(obj, dict):
        raise ConfigError(path, "expected an object")
    if "observable" in obj:
        observable = _parse_observable(obj["observable"], f"{path}.observable")
    else:
        observable = SIGMA_Z if observed else IDENTITY
    spin = SpinParams(
        epsilon=_number(obj, "epsilon", path),
        delta=_number(obj, "delta", path),
        J=_number(obj, "J", path),
        initial_state=_integer(obj, "initial", path, 1),
        observable=observable,
    )
    if "bath" not in obj:
        raise ConfigError(f"{path}.bath", "missing")
    return spin, _parse_bath(obj["bath"], f"{path}.bath")


def config_from_dict(data: dict) -> ChainConfig:
    """Build and validate a :class:`ChainConfig` from decoded JSON."""
    if not isinstance(data, dict):
        raise ConfigError("$", "top level must be an object")
    num = data.get("numerics")
    if not isinstance(num, dict):
        raise ConfigError("numerics", "missing or not an object")
    numerics = NumericsParams(
        dt=_number(num, "dt", "numerics"),
        n_steps=_integer(num, "n_steps", "numerics"),
        m_bar=_integer(num, "m_bar", "numerics", 3),
        n_bar=_integer(num, "n_bar", "numerics", 2),
        threads=_integer(num, "threads", "numerics", 1),
    )
    target = _integer(data, "observable_spin", "$", 0)
    if "spins" in data:
        raw_spins = data["spins"]
        if not isinstance(raw_spins, list):
            raise ConfigError("spins", "expected a list")
        items = [(raw, f"spins[{k}]") for k, raw in enumerate(raw_spins)]
    elif "spins_uniform" in data:
        count = _integer(data, "count", "$")
        items = [(data["spins_uniform"], "spins_uniform")] * count
    else:
        raise ConfigError("spins", "need 'spins' or 'spins_uniform' with 'count'")
    spins = tuple(_parse_spin(raw, path, k == target) for k, (raw, path) in enumerate(items))
    extra = {k: v for k, v in data.items()
             if k not in {"numerics", "observable_spin", "spins", "spins_uniform", "count"}}
    cfg = ChainConfig(spins=spins, numerics=numerics, observable_spin=target, extra=extra)
    validate(cfg)
    return cfg


def validate(cfg: ChainConfig) -> None:
    n = cfg.numerics
    if not n.dt > 0:
        raise ConfigError("numerics.dt", "must be positive")
    if n.n_steps < 1:
        raise ConfigError("numerics.n_steps", "must be >= 1")
    if n.m_bar < 1 or n.m_bar % 2 == 0:
        raise ConfigError("numerics.m_bar", "m_bar must be odd and >= 1")
    if n.m_bar > MAX_M_BAR:
        raise ConfigError("numerics.m_bar", f"m_bar must be <= {MAX_M_BAR}")
    if n.n_bar < 0:
        raise ConfigError("numerics.n_bar", "must be >= 0")
    if n.threads < 1:
        raise ConfigError("numerics.threads", "must be >= 1")
    if not cfg.spins:
        raise ConfigError("spins", "chain needs at least one spin")
    if not 0 <= cfg.observable_spin < len(cfg.spins):
        raise ConfigError("observable_spin", f"must index one of the {len(cfg.spins)} spins")
    for k, (spin, bath) in enumerate(cfg.spins):
        path = f"spins[{k}]"
        if spin.initial_state not in (1, -1):
            raise ConfigError(f"{path}.initial", "must be +1 or -1")
        if not all(math.isfinite(v) for v in (spin.epsilon, spin.delta, spin.J)):
            raise ConfigError(path, "spin parameters must be finite")
        if bath.xi < 0:
            raise ConfigError(f"{path}.bath.xi", "must be >= 0")
        if not bath.beta > 0:
            raise ConfigError(f"{path}.bath.beta", "must be positive")
        if not bath.omega_c > 0:
            raise ConfigError(f"{path}.bath.omega_c", "must be positive")
        if not bath.omega_max > 0:
            raise ConfigError(f"{path}.bath.omega_max", "must be positive")
        if bath.n_osc < 1:
            raise ConfigError(f"{path}.bath.n_osc", "must be >= 1")


def load_config(path: str | Path) -> ChainConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("$", f"JSON parse error: {exc}") from None
    return config_from_dict(data)


def _complex_entry(z: complex) -> list[float]:
    return [z.real, z.imag]


def config_to_dict(cfg: ChainConfig) -> dict:
    """Explicit-form JSON document that :func:`config_from_dict` reads back to ``cfg``."""
    spins = []
    for spin, bath in cfg.spins:
        obs = spin.observable
        spins.append({
            "epsilon": spin.epsilon, "delta": spin.delta, "J": spin.J,
            "initial": spin.initial_state,
            "observable": [[_complex_entry(obs[0]), _complex_entry(obs[1])],
                           [_complex_entry(obs[2]), _complex_entry(obs[3])]],
            "bath": {"xi": bath.xi, "beta": bath.beta, "omega_c": bath.omega_c,
                     "omega_max": bath.omega_max, "n_osc": bath.n_osc},
        })
    n = cfg.numerics
    return {
        **cfg.extra,
        "numerics": {"dt": n.dt, "n_steps": n.n_steps, "m_bar": n.m_bar,
                     "n_bar": n.n_bar, "threads": n.threads},
        "observable_spin": cfg.observable_spin,
        "spins": spins,
    }


def save_config(cfg: ChainConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2))


def spin_classes(cfg: ChainConfig) -> list[list[int]]:
    """Group spins whose Hamiltonian, coupling and bath parameters coincide exactly.

    Observables and initial states are ignored: they do not enter the one-sided
    propagators, and the observable-dependent parts are cached separately.
    """
    groups: dict[tuple, list[int]] = {}
    for k, (spin, bath) in enumerate(cfg.spins):
        groups.setdefault((spin.physical_key(), bath), []).append(k)
    return list(groups.values())


def uniform_chain(count: int, *, epsilon: float = 1.0, delta: float = 1.0, J: float = 0.2,
                  xi: float = 0.2, beta: float = 5.0, omega_c: float = 2.5,
                  omega_max_factor: float = 4.0, n_osc: int = DEFAULT_N_OSC,
                  dt: float = 0.2, n_steps: int = 5, m_bar: int = 3, n_bar: int = 2,
                  initial: int = 1, target: int = 0, threads: int = 1) -> ChainConfig:
    """Convenience constructor for chains of identical spins (defaults: the 5-spin convergence setup)."""
    return config_from_dict({
        "numerics": {"dt": dt, "n_steps": n_steps, "m_bar": m_bar, "n_bar": n_bar,
                     "threads": threads},
        "observable_spin": target,
        "spins_uniform": {"epsilon": epsilon, "delta": delta, "J": J, "initial": initial,
                          "bath": {"xi": xi, "beta": beta, "omega_c": omega_c,
                                   "omega_max_factor": omega_max_factor, "n_osc": n_osc}},
        "count": count,
    })
