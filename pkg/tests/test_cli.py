import json

import numpy as np
import pytest

from inchworm_chain import cli
from inchworm_chain.config import config_to_dict, uniform_chain
from inchworm_chain.resummation import read_csv


def config_file(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(config_to_dict(cfg)))
    return str(path)


def test_run_writes_outputs(tmp_path, capsys):
    cfg = config_file(tmp_path, uniform_chain(2, n_steps=3, m_bar=1, n_bar=1))
    out = tmp_path / "res" / "traj.csv"
    code = cli.main(["run", "--config", cfg, "--out", str(out), "--emit-plot-script",
                     "--dump-bath-table", str(tmp_path / "bath.csv")])
    assert code == 0
    text = capsys.readouterr().out
    assert "estimated store memory" in text and "L_b^c evaluations" in text
    assert text.index("estimated store memory") < text.index("inchworm solve")
    assert out.exists() and out.with_suffix(".png").exists() and out.with_suffix(".gp").exists()
    assert (tmp_path / "bath.csv").read_text().startswith("lag,re,im")
    assert sorted(read_csv(out)) == [1]


def test_target_all_mirror(tmp_path):
    cfg = config_file(tmp_path, uniform_chain(5, n_steps=2, m_bar=1, n_bar=2))
    out = tmp_path / "t.csv"
    assert cli.main(["run", "--config", cfg, "--out", str(out), "--target", "all", "--no-plot"]) == 0
    rows = read_csv(out)
    assert sorted(rows) == [1, 2, 3, 4, 5]
    assert np.max(np.abs(rows[1][:, 1] - rows[5][:, 1])) < 1e-10
    assert np.max(np.abs(rows[2][:, 1] - rows[4][:, 1])) < 1e-10
    assert not out.with_suffix(".png").exists()


def test_fifty_spins_single_class(tmp_path, capsys):
    cfg = config_file(tmp_path, uniform_chain(50, n_steps=2, m_bar=1, n_bar=1))
    out = tmp_path / "fifty.csv"
    assert cli.main(["run", "--config", cfg, "--out", str(out), "--target", "all", "--no-plot"]) == 0
    assert "(1 spin class(es))" in capsys.readouterr().out
    assert sorted(read_csv(out)) == list(range(1, 51))


def test_checkpoint_reused(tmp_path, capsys):
    cfg = config_file(tmp_path, uniform_chain(2, n_steps=3, m_bar=1, n_bar=1))
    args = ["run", "--config", cfg, "--out", str(tmp_path / "c.csv"), "--no-plot",
            "--checkpoint", str(tmp_path / "ck")]
    assert cli.main(args) == 0
    first = (tmp_path / "c.csv").read_bytes()
    capsys.readouterr()
    assert cli.main(args) == 0
    assert "loaded from checkpoint: 2" in capsys.readouterr().out
    assert (tmp_path / "c.csv").read_bytes() == first


def test_missing_config_file(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "nope.json")]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["run"])
    assert exc.value.code == 2


def test_bad_config_and_target(tmp_path):
    data = config_to_dict(uniform_chain(2, n_steps=2))
    data["numerics"]["m_bar"] = 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(data))
    assert cli.main(["run", "--config", str(bad)]) == 2
    good = config_file(tmp_path, uniform_chain(2, n_steps=2, m_bar=1, n_bar=1))
    assert cli.main(["run", "--config", good, "--target", "7"]) == 2
    assert cli.main(["run", "--config", good, "--target", "x"]) == 2


def test_sim_threads_env(monkeypatch):
    args = cli.build_parser().parse_args(["run", "--config", "x.json"])
    monkeypatch.setenv("SIM_THREADS", "3")
    assert cli._threads(args) == 3
    args = cli.build_parser().parse_args(["run", "--config", "x.json", "--threads", "2"])
    assert cli._threads(args) == 2


def test_cost_scan(tmp_path, capsys):
    cfg = config_file(tmp_path, uniform_chain(1, n_steps=4, m_bar=1, n_bar=1))
    out = tmp_path / "scan.csv"
    assert cli.main(["cost-scan", "--config", cfg, "--m-bar", "1", "--n-bar", "1",
                     "--steps", "4", "8", "16", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "expected slope 4" in text
    lines = out.read_text().splitlines()
    assert lines[0].startswith("L,influence_evals") and len(lines) == 4
    assert out.with_suffix(".png").exists()


def test_cost_counts_thread_independent(tmp_path):
    cfg = uniform_chain(1, n_steps=4)
    a = cli.cost_scan(cfg, [6], 3, 1, threads=1)
    b = cli.cost_scan(cfg, [6], 3, 1, threads=2)
    assert a[0][:3] == b[0][:3]


def test_cost_scan_rejects_even_order(tmp_path):
    cfg = config_file(tmp_path, uniform_chain(1, n_steps=4))
    assert cli.main(["cost-scan", "--config", cfg, "--m-bar", "2", "--steps", "4"]) == 2


def test_oracle_closed_chain_passes(tmp_path, capsys):
    cfg = config_file(tmp_path, uniform_chain(3, xi=0.0, dt=0.1, n_steps=10, m_bar=1, n_bar=3))
    assert cli.main(["oracle", "--config", cfg]) == 0
    text = capsys.readouterr().out
    assert text.count("PASS") == 3 and "max dev" in text


def test_oracle_tiny_bath_chain_passes(tmp_path, capsys):
    cfg = config_file(tmp_path, uniform_chain(2, dt=0.2, n_steps=3, m_bar=1, n_bar=2))
    assert cli.main(["oracle", "--config", cfg]) == 0
    assert "PASS  distributive law" in capsys.readouterr().out


def test_oracle_negative_control(tmp_path, capsys):
    cfg = config_file(tmp_path, uniform_chain(2, dt=0.2, n_steps=3, m_bar=1, n_bar=2))
    assert cli.main(["oracle", "--config", cfg, "--corrupt-weights", "1.01"]) == 1
    assert "FAIL  distributive law" in capsys.readouterr().out
    # the hook is reset afterwards
    assert cli.main(["oracle", "--config", cfg]) == 0
