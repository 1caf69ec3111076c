import json

import pytest

from inchworm_chain.config import (
    DEFAULT_N_OSC, IDENTITY, SIGMA_Z, ConfigError, config_from_dict, config_to_dict,
    load_config, save_config, spin_classes, uniform_chain,
)

CONVERGENCE = {
    "numerics": {"dt": 0.2, "n_steps": 10, "m_bar": 3, "n_bar": 2},
    "count": 5,
    "spins_uniform": {"epsilon": 1.0, "delta": 1.0, "J": 0.2,
                      "bath": {"xi": 0.2, "beta": 5.0, "omega_c": 2.5, "omega_max_factor": 4.0}},
}


def write(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


def test_convergence_file_accepted(tmp_path):
    cfg = load_config(write(tmp_path, CONVERGENCE))
    assert cfg.n_spins == 5
    spin, bath = cfg.spins[2]
    assert (spin.epsilon, spin.delta, spin.J, spin.initial_state) == (1.0, 1.0, 0.2, 1)
    assert bath.omega_max == pytest.approx(10.0)
    assert cfg.grid.dt == 0.2 and cfg.grid.n_steps == 10


def test_missing_n_osc_defaults_to_400(tmp_path):
    cfg = load_config(write(tmp_path, CONVERGENCE))
    assert all(b.n_osc == DEFAULT_N_OSC == 400 for _, b in cfg.spins)


def test_even_m_bar_rejected(tmp_path):
    bad = json.loads(json.dumps(CONVERGENCE))
    bad["numerics"]["m_bar"] = 2
    with pytest.raises(ConfigError, match="m_bar must be odd"):
        load_config(write(tmp_path, bad))


@pytest.mark.parametrize("path,value", [
    (("numerics", "dt"), -0.1),
    (("numerics", "n_steps"), 0),
    (("numerics", "n_bar"), -1),
    (("spins_uniform", "bath", "beta"), 0.0),
    (("spins_uniform", "bath", "xi"), -0.5),
    (("spins_uniform", "initial"), 0),
])
def test_invalid_values_rejected(path, value):
    bad = json.loads(json.dumps(CONVERGENCE))
    node = bad
    for key in path[:-1]:
        node = node[key]
    node[path[-1]] = value
    with pytest.raises(ConfigError):
        config_from_dict(bad)


def test_malformed_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)


def test_observable_defaults():
    cfg = uniform_chain(3, target=1)
    assert [sp.observable for sp, _ in cfg.spins] == [IDENTITY, SIGMA_Z, IDENTITY]


def test_roundtrip(tmp_path):
    cfg = uniform_chain(4, xi=0.1, n_steps=7, target=2)
    save_config(cfg, tmp_path / "c.json")
    again = load_config(tmp_path / "c.json")
    assert again == cfg
    assert config_from_dict(config_to_dict(cfg)) == cfg


def test_spin_classes_uniform_50():
    assert spin_classes(uniform_chain(50)) == [list(range(50))]


def test_spin_classes_single():
    assert spin_classes(uniform_chain(1)) == [[0]]


def test_spin_classes_distinct_epsilon():
    data = json.loads(json.dumps(CONVERGENCE))
    spin = data.pop("spins_uniform")
    data.pop("count")
    data["spins"] = [dict(spin, epsilon=float(k)) for k in range(5)]
    assert len(spin_classes(config_from_dict(data))) == 5


def test_classes_ignore_observable_and_initial():
    data = json.loads(json.dumps(CONVERGENCE))
    spin = data.pop("spins_uniform")
    data.pop("count")
    data["spins"] = [dict(spin, initial=1 if k % 2 else -1) for k in range(4)]
    assert spin_classes(config_from_dict(data)) == [[0, 1, 2, 3]]


def test_grid_index():
    grid = uniform_chain(1, dt=0.1, n_steps=10).grid
    assert grid.index(0.3) == 3
    assert grid.index(-0.7) == -7
    with pytest.raises(ValueError):
        grid.index(0.35)
