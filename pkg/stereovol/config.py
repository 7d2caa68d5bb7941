"""
Run configuration.

A configuration file is one flat JSON object. Its keys are the TrainConfig
fields plus the keys of ``GLOBAL_KEYS``; any other key is an error.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from stereovol.encoders import DEFAULT_IMAGE_ENCODER, DEFAULT_TEXT_ENCODER
from stereovol.exceptions import ConfigError
from stereovol.models import TrainConfig
from stereovol.utils import verify_key_value_set, verify_key_value_type

logger = logging.getLogger(__name__)

LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]

_OPTIONAL_STR = (str, type(None))
_OPTIONAL_INT = (int, type(None))

# Key -> accepted types
GLOBAL_KEYS = {
    "data_root": _OPTIONAL_STR,
    "cache_dir": _OPTIONAL_STR,
    "output_dir": str,
    "image_encoder.name": str,
    "image_encoder.dim": _OPTIONAL_INT,
    "image_encoder.seed": int,
    "text_encoder.name": str,
    "text_encoder.dim": _OPTIONAL_INT,
    "text_encoder.seed": int,
    "log_level": str,
}

_ANNOTATION_TYPES = {
    int: int,
    float: (int, float),
    bool: bool,
    str: str,
    Optional[int]: _OPTIONAL_INT,
}

TRAIN_KEYS = {f.name: _ANNOTATION_TYPES[f.type] for f in fields(TrainConfig)}


@dataclass(frozen=True)
class EncoderSelection:
    name: str
    dim: Optional[int] = None
    seed: int = 0


@dataclass(frozen=True)
class GlobalConfig:
    """Everything a command needs besides its input files."""

    train: TrainConfig = field(default_factory=TrainConfig)
    data_root: Optional[str] = None
    cache_dir: Optional[str] = None
    output_dir: str = "runs"
    image_encoder: EncoderSelection = EncoderSelection(DEFAULT_IMAGE_ENCODER)
    text_encoder: EncoderSelection = EncoderSelection(DEFAULT_TEXT_ENCODER)
    log_level: str = "INFO"

    def to_dict(self) -> dict:
        """Flat representation, the inverse of ``config_from_dict``."""
        data = asdict(self.train)
        data.update(
            {
                "data_root": self.data_root,
                "cache_dir": self.cache_dir,
                "output_dir": self.output_dir,
                "log_level": self.log_level,
            }
        )
        for prefix, selection in (
            ("image_encoder", self.image_encoder),
            ("text_encoder", self.text_encoder),
        ):
            for key, value in asdict(selection).items():
                data[f"{prefix}.{key}"] = value
        return data


def config_from_dict(data: dict) -> GlobalConfig:
    """Validate a flat configuration and build a GlobalConfig."""
    if not isinstance(data, dict):
        raise ConfigError("The configuration must be a JSON object")
    unknown = sorted(set(data) - set(GLOBAL_KEYS) - set(TRAIN_KEYS))
    if unknown:
        raise ConfigError(f"Unknown configuration keys {unknown}")

    try:
        for key in data:
            types = GLOBAL_KEYS.get(key) or TRAIN_KEYS[key]
            verify_key_value_type("config", key, data, types)
        if "log_level" in data:
            verify_key_value_set("config", "log_level", data, LOG_LEVELS)
        train = TrainConfig(**{k: v for k, v in data.items() if k in TRAIN_KEYS})
    except ValueError as err:
        raise ConfigError(str(err)) from err

    defaults = GlobalConfig()

    def selection(prefix, default):
        return EncoderSelection(
            name=data.get(f"{prefix}.name", default.name),
            dim=data.get(f"{prefix}.dim", default.dim),
            seed=data.get(f"{prefix}.seed", default.seed),
        )

    return GlobalConfig(
        train=train,
        data_root=data.get("data_root", defaults.data_root),
        cache_dir=data.get("cache_dir", defaults.cache_dir),
        output_dir=data.get("output_dir", defaults.output_dir),
        image_encoder=selection("image_encoder", defaults.image_encoder),
        text_encoder=selection("text_encoder", defaults.text_encoder),
        log_level=data.get("log_level", defaults.log_level),
    )


def load_config(path=None, overrides: Optional[dict] = None) -> GlobalConfig:
    """Read a configuration file and apply overrides, which win over the file."""
    data = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as file:
                data = json.load(file)
        except OSError as err:
            raise ConfigError(f"Cannot read configuration {path}: {err}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"Configuration {path} is not valid JSON: {err}") from err
        if not isinstance(data, dict):
            raise ConfigError("The configuration must be a JSON object")
    data = {**data, **(overrides or {})}
    config = config_from_dict(data)
    logger.debug("Loaded configuration %s", config.to_dict())
    return config
