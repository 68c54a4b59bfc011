import json
from pathlib import Path

import pytest

import config
from errors import ConfigurationError
from run_config import EFFECTIVE_CONFIG, RunConfig, apply_overrides, parse_config, save_config

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def test_defaults_when_nothing_is_given():
    cfg = parse_config()
    assert cfg.mode == "det"
    assert cfg.field.mean_viscosity == config.MEAN_VISCOSITY
    assert cfg.barriers == list(config.TIME_BARRIERS)
    assert cfg.smolyak_level == cfg.field.p_xi


def test_partial_sections_keep_other_defaults():
    cfg = parse_config({"field": {"cov": 0.01}, "stepper": {"final_time": 2.0}, "barriers": [0.1, 1, 2]})
    assert cfg.field.cov == 0.01
    assert cfg.field.m_xi == config.STOCHASTIC_DIM
    assert cfg.stepper.tolerance == config.TOLERANCE
    assert cfg.barriers == [0.1, 1.0, 2.0]


def test_unknown_key_is_named():
    with pytest.raises(ConfigurationError) as info:
        parse_config({"stepper": {"tolerence": 1e-3}})
    assert info.value.key == "stepper.tolerence"


@pytest.mark.parametrize("document, key", [
    ({"field": {"cov": -0.1}}, "field.cov"),
    ({"field": {"mean_viscosity": 0.0}}, "field.mean_viscosity"),
    ({"mode": "pce"}, "mode"),
    ({"stepper": {"final_time": 1.0}, "barriers": [0.5, 2.0]}, "barriers"),
    ({"barriers": [1.0, 0.5]}, "barriers"),
    ({"probes": [[2.0, 0.0]]}, "probes[0]"),
    ({"probes": [[13.0, 0.0]]}, "probes[0]"),
    ({"solver": {"block_solver": "amg"}}, "solver.block_solver"),
    ({"mesh": {"refinement": 0}}, "mesh.refinement"),
    ({"sampling": {"threads": 0}}, "sampling.threads"),
])
def test_invalid_values_name_their_key(document, key):
    with pytest.raises(ConfigurationError) as info:
        parse_config(document)
    assert info.value.key == key


def test_negative_cov_message():
    with pytest.raises(ConfigurationError, match="CoV must be nonnegative"):
        parse_config({"field": {"cov": -0.5}})


def test_malformed_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{\"field\": ")
    with pytest.raises(ConfigurationError, match="malformed JSON"):
        parse_config(str(path))


def test_command_line_overrides_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"sampling": {"seed": 3, "threads": 2}, "output": {"directory": "elsewhere"}}))
    cfg = apply_overrides(parse_config(str(path)), mode="mc", out=str(tmp_path / "out"), seed=11)
    assert cfg.mode == "mc"
    assert cfg.sampling.seed == 11
    assert cfg.sampling.threads == 2
    assert cfg.output.directory == str(tmp_path / "out")
    assert cfg.sampling.level == cfg.field.p_xi


def test_saved_configuration_reproduces_run(tmp_path):
    cfg = apply_overrides(parse_config({"field": {"cov": 0.01, "p_xi": 2}, "barriers": [0.0, 0.5]}),
                          mode="sg", out=str(tmp_path))
    path = save_config(cfg)
    assert path.endswith(EFFECTIVE_CONFIG)
    assert parse_config(path) == cfg


def test_shipped_configurations_are_valid():
    for name in ("desk_re100_cov10.json", "desk_re300_cov1.json", "full_re100_cov10.json"):
        cfg = parse_config(CONFIG_DIR / name)
        assert isinstance(cfg, RunConfig)
        assert cfg.barriers[-1] <= cfg.stepper.final_time
