import pytest
import yaml

from amortlearn.config import ConfigError, config_from_dict, dump_config, load_config
from amortlearn.recipes import CONFIG_DIR

BASE = {"version": 1, "task": {"name": "linreg", "d": 4}}


def test_minimal_config_fills_defaults():
    cfg = config_from_dict(BASE)
    assert cfg.regime.regime == "parametric" and cfg.train.learning_rate == 3e-4
    assert cfg.flow is None and cfg.leaf is None


def test_round_trip_through_yaml(tmp_path):
    cfg = config_from_dict({**BASE, "regime": {"regime": "explicit", "signal": "grad"}, "eval": {"k_values": [0, 2]}})
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    again = load_config(path)
    assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize(
    "raw",
    [
        {**BASE, "extra": 1},
        {**BASE, "train": {"learning_rat": 0.1}},
        {**BASE, "version": 2},
        {"version": 1},
        {**BASE, "task": {"name": "linreg", "dim": 3}},
        {**BASE, "regime": {"regime": "implicit", "signal": "grad"}},
        {**BASE, "train": {"learning_rate": -1}},
        {**BASE, "seed": "zero"},
        {**BASE, "eval": {"ood_task": {"name": "nope"}}},
        {**BASE, "model": "big"},
        ["not", "a", "mapping"],
    ],
)
def test_invalid_configs_raise_config_error(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_unparseable_yaml(tmp_path):
    (tmp_path / "bad.yaml").write_text("task: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_pipeline_sections_added():
    assert config_from_dict({"version": 1, "task": {"name": "gmm"}}).flow is not None
    assert config_from_dict({"version": 1, "task": {"name": "scm"}}).leaf is not None


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.yaml")), ids=lambda p: p.stem)
def test_packaged_configs_load(path):
    cfg = load_config(path)
    assert yaml.safe_load(dump_config(cfg))["version"] == 1
