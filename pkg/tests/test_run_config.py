from __future__ import annotations

import json

import numpy as np
import pytest

from src.errors import ConfigError
from src.run_config import STATE_PRESETS, load_config, parse_config, parse_matrix

BASE = {
    "frequency_unit": 2.0,
    "bath": {"type": "damped_mode", "g": 0.5, "omega": 0.0, "gamma": 1.0},
    "system": {"couplings": ["sigma_x", "sigma_y"], "hamiltonian": [{"op": "sigma_x", "coeff": 0.5}]},
    "numerics": {"dt": 0.1, "n_c": 8},
    "task": {"kind": "propagate", "t_end": 2.0},
}


def _with(section, **changes):
    raw = json.loads(json.dumps(BASE))
    raw.setdefault(section, {}).update(changes)
    return raw


def test_minimal_config_defaults():
    cfg = parse_config(BASE)
    assert cfg.numerics.chi_max == 512
    assert cfg.numerics.boundary == "product"
    assert cfg.output.formats == ["csv", "json"]
    assert cfg.rate(0.5) == 1.0 and cfg.time(0.1) == 0.05


def test_resolved_config_round_trips():
    cfg = parse_config(BASE)
    assert parse_config(cfg.resolved()) == cfg


def test_exactly_one_memory_cutoff():
    with pytest.raises(ConfigError):
        parse_config(_with("numerics", tol_mem=1e-6))
    raw = _with("numerics")
    del raw["numerics"]["n_c"]
    with pytest.raises(ConfigError):
        parse_config(raw)


@pytest.mark.parametrize("section, changes", [
    ("bath", {"type": "mystery"}),
    ("numerics", {"dt": -0.1}),
    ("numerics", {"unknown_knob": 3}),
    ("task", {"kind": "oracle_compare"}),
    ("task", {"omega_min": 2.0, "omega_max": 1.0}),
])
def test_invalid_configs(section, changes):
    with pytest.raises(ConfigError):
        parse_config(_with(section, **changes))


def test_with_updates_keeps_other_sections():
    cfg = parse_config(BASE)
    changed = cfg.with_updates("numerics", dt=0.05)
    assert changed.numerics.dt == 0.05 and changed.numerics.n_c == 8
    assert changed.bath == cfg.bath


def test_parse_matrix_forms():
    np.testing.assert_allclose(parse_matrix("sigma_z"), np.diag([1.0, -1.0]))
    np.testing.assert_allclose(parse_matrix([[0, [0, -1]], [[0, 1], 0]]), [[0, -1j], [1j, 0]])
    np.testing.assert_allclose(parse_matrix("mixed", STATE_PRESETS), 0.5 * np.eye(2))
    with pytest.raises(ConfigError):
        parse_matrix("sigma_w")
    with pytest.raises(ConfigError):
        parse_matrix([[1, 0]])
    with pytest.raises(ConfigError):
        parse_matrix([[[1, 2, 3]]])


def test_load_toml_and_json(tmp_path):
    toml = tmp_path / "run.toml"
    toml.write_text(
        'frequency_unit = 1.0\n'
        '[bath]\ntype = "exponential_sum"\n'
        '[[bath.terms]]\ncoeff = [[0.2]]\ngamma = 1.0\n'
        '[system]\ncouplings = ["sigma_z"]\n'
        '[numerics]\ndt = 0.1\nn_c = 4\n'
        '[task]\nkind = "propagate"\n'
    )
    cfg = load_config(toml)
    assert cfg.bath.terms[0].coeff == [[0.2]]
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg.resolved()))
    assert load_config(path) == cfg


def test_unreadable_configs(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[bath\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_named_observables():
    assert parse_config(BASE).task.named_observables() == {"sigma_z": "sigma_z"}
    cfg = parse_config(_with("task", observables={"pop": "occupation", "x": [[0, 1], [1, 0]]}))
    named = cfg.task.named_observables()
    np.testing.assert_allclose(parse_matrix(named["pop"]), np.diag([1.0, 0.0]))
    np.testing.assert_allclose(parse_matrix(named["x"]), [[0, 1], [1, 0]])
    assert parse_config(cfg.resolved()) == cfg


def test_two_emitter_presets():
    rho = parse_matrix("up_down", STATE_PRESETS)
    np.testing.assert_allclose(rho, np.diag([0.0, 1.0, 0.0, 0.0]))
    occ_a, occ_b = parse_matrix("occupation_a"), parse_matrix("occupation_b")
    np.testing.assert_allclose(occ_b, np.diag([1.0, 0.0, 1.0, 0.0]))
    assert np.trace(occ_a @ rho) == pytest.approx(1.0)
    assert np.trace(occ_b @ rho) == pytest.approx(0.0)
    np.testing.assert_allclose(parse_matrix("sigma_x_a"), np.kron(parse_matrix("sigma_x"), np.eye(2)))
    with pytest.raises(ConfigError):
        parse_matrix("sigma_x_c")
