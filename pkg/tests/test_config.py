import json

from pytest import raises

from stereovol.config import (
    GLOBAL_KEYS,
    TRAIN_KEYS,
    GlobalConfig,
    config_from_dict,
    load_config,
)
from stereovol.exceptions import ConfigError
from stereovol.models import TrainConfig


def test_defaults():
    config = config_from_dict({})
    assert config == GlobalConfig()
    assert config.train == TrainConfig()
    assert config.log_level == "INFO"


def test_keys_are_disjoint():
    assert not set(GLOBAL_KEYS) & set(TRAIN_KEYS)
    assert "projection_dim" in TRAIN_KEYS


def test_config_from_dict():
    config = config_from_dict(
        {
            "epochs": 7,
            "learning_rate": 1,
            "standardize_targets": True,
            "regressor_hidden": None,
            "image_encoder.name": "test",
            "image_encoder.dim": 32,
            "text_encoder.name": "test",
            "cache_dir": "/tmp/cache",
            "log_level": "DEBUG",
        }
    )
    assert config.train.epochs == 7
    assert config.train.learning_rate == 1
    assert config.train.standardize_targets
    assert config.image_encoder.name == "test"
    assert config.image_encoder.dim == 32
    assert config.text_encoder.dim is None
    assert config.cache_dir == "/tmp/cache"


def test_to_dict_round_trip():
    config = config_from_dict(
        {"epochs": 3, "text_encoder.seed": 4, "output_dir": "out"}
    )
    assert config_from_dict(config.to_dict()) == config


def test_unknown_key():
    with raises(ConfigError) as info:
        config_from_dict({"epoch": 3})
    assert "epoch" in str(info.value)


def test_wrong_types():
    for data in (
        {"epochs": 2.5},
        {"epochs": True},
        {"standardize_targets": 1},
        {"learning_rate": "0.1"},
        {"image_encoder.dim": "32"},
        {"output_dir": None},
    ):
        with raises(ConfigError):
            config_from_dict(data)


def test_invalid_values():
    with raises(ConfigError):
        config_from_dict({"epochs": 0})
    with raises(ConfigError):
        config_from_dict({"log_level": "VERBOSE"})
    with raises(ConfigError):
        config_from_dict({"lambda_mse": 0.0, "mu_ce": 0.0})


def test_load_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"epochs": 5, "seed": 1}))
    config = load_config(path, overrides={"seed": 9})
    assert config.train.epochs == 5
    assert config.train.seed == 9
    assert load_config().train == TrainConfig()


def test_load_config_errors(tmp_path):
    with raises(ConfigError):
        load_config(tmp_path / "missing.json")
    path = tmp_path / "config.json"
    path.write_text("{epochs: 5}")
    with raises(ConfigError):
        load_config(path)
    path.write_text("[]")
    with raises(ConfigError):
        load_config(path)
