"""Semantic-token person re-identification on a numpy autodiff core."""

from .config import TrainConfig, apply_variant, load_config, parse_config
from .errors import ConfigError, DatasetError, FormatError, NumericError, ReIDError
from .model import ReIDModel

__all__ = [
    "ConfigError",
    "DatasetError",
    "FormatError",
    "NumericError",
    "ReIDError",
    "ReIDModel",
    "TrainConfig",
    "apply_variant",
    "load_config",
    "parse_config",
]
__version__ = "0.1.0"
