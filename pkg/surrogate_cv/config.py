"""
Configuration loading for surrogate control-variates estimation.

Defaults live in estimator_config.yaml next to this module. A user file is
merged over them key by key, and the logging section configures the root
logger.
"""

import copy
import logging
import os
from typing import Any, Dict, Optional

import yaml

from .errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_FILE = "estimator_config.yaml"


def _read_yaml(config_path: str) -> Dict[str, Any]:
    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            data = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"Configuration file '{config_path}' not found")
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML in configuration file {config_path}: {e}")

    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"Configuration file {config_path} must contain a mapping")
    return data


def merge_config(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Return a copy of base with override merged in, recursing into nested mappings."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_config(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def default_configuration() -> Dict[str, Any]:
    """Load the shipped defaults without touching logging."""
    module_dir = os.path.dirname(os.path.abspath(__file__))
    return _read_yaml(os.path.join(module_dir, DEFAULT_CONFIG_FILE))


def setup_logging(config: Dict[str, Any]) -> None:
    log_config = config.get('logging', {})
    level_name = str(log_config.get('level', 'INFO')).upper()
    log_level = getattr(logging, level_name, None)
    if not isinstance(log_level, int):
        raise ConfigError(f"Unknown logging level: {level_name}")
    log_format = log_config.get('format', '%(asctime)s - %(levelname)s - %(message)s')

    logging.basicConfig(
        level=log_level,
        format=log_format,
        force=True  # Override any existing configuration
    )


def load_configuration(config_file: Optional[str] = None, configure_logging: bool = True) -> Dict[str, Any]:
    """Load application configuration, merging config_file over the defaults."""
    config = default_configuration()
    if config_file:
        config = merge_config(config, _read_yaml(config_file))

    if configure_logging:
        setup_logging(config)

    source = config_file or DEFAULT_CONFIG_FILE
    logger.info(f"Successfully loaded configuration from {source}")
    return config
