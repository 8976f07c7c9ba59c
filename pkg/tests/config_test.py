from pathlib import Path

import pytest
import toml

from src.config import DEFAULTS, build_experiment_config, load_experiment_config, snr_grid_in_range
from src.errors import ConfigurationError

CONFIG_PATH = Path(__file__).parent.parent / "config.toml"


def test_repo_config_matches_defaults():
    config = load_experiment_config(str(CONFIG_PATH))
    assert config.to_dict() == build_experiment_config({}).to_dict()
    assert config.channel.params.m == 19.4
    assert config.thresholds.gamma1 == 3.0
    assert config.blur_policy.tiers[-1].kernel == 1
    assert config.semantic_codec.downsampling == 8


def test_manifest_config_round_trip(tmp_path):
    raw = {"SWEEP": {"snr_grid": [-5.0, 5.0], "workers": 2}}
    config = build_experiment_config(raw)
    path = tmp_path / "manifest.toml"
    with open(path, "w") as f:
        toml.dump({"command": "sweep", "CONFIG": config.to_dict()}, f)
    again = load_experiment_config(str(path))
    assert again.sweep.snr_grid == (-5.0, 5.0)
    assert again.to_dict() == config.to_dict()


def test_missing_file():
    with pytest.raises(ConfigurationError):
        load_experiment_config("does_not_exist.toml")


@pytest.mark.parametrize(
    "raw",
    [
        {"UNKNOWN": {}},
        {"CHANNEL": {"snr": 3}},
        {"CHANNEL": {"b0": 0.0}},
        {"CHANNEL": {"snr_db_min": 5.0, "snr_db_max": 5.0}},
        {"THRESHOLDS": {"gamma1_db": -5.0, "gamma2_db": 0.0}},
        {"TASK": {"task_classes": [7]}},
        {"TASK": {"task_classes": []}},
        {"BLUR_POLICY": {"thresholds": [0.0, 10.0], "kernels": [2, 1]}},
        {"DATASET": {"source": "camera"}},
        {"DATASET": {"image_size": 60}},
        {"TRAINING": {"batch_size": 0}},
        {"SEMANTIC_CODEC": {"heads": [3, 8]}},
        {"EVALUATOR": {"alpha": 0.0}},
        {"SWEEP": {"workers": 0}},
        {"ABLATION": {"selection_tier_kernel": 7}},
        {"SEGMENTATION": {"widths": [8, 16]}},
    ],
)
def test_invalid_configs(raw):
    with pytest.raises(ConfigurationError):
        build_experiment_config(raw)


def test_snr_grid_in_range():
    config = build_experiment_config({})
    snr_grid_in_range([-10.0, 0.0, 10.0], config)
    with pytest.raises(ConfigurationError):
        snr_grid_in_range([], config)
    with pytest.raises(ConfigurationError):
        snr_grid_in_range([0.0, 12.0], config)


def test_defaults_cover_every_section():
    assert set(build_experiment_config({}).to_dict()) == set(DEFAULTS)
