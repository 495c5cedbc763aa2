from pathlib import Path
from typing import Any

import yaml
from pydantic import ValidationError

from src.schemas.experiment import ExperimentConfig
from src.services.errors import ConfigError


def _describe(error: ValidationError) -> str:
    first = error.errors()[0]
    key = ".".join(str(part) for part in first["loc"]) or "config"
    return f"{key}: {first['msg']}"


def validate_config(data: dict[str, Any]) -> ExperimentConfig:
    """
    Validates a raw config mapping.

    Args:
        data (dict[str, Any]): Parsed YAML document.

    Returns:
        ExperimentConfig: Config with every default applied.

    Raises:
        ConfigError: Naming the first offending key.
    """
    if not isinstance(data, dict):
        raise ConfigError("the config document must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as error:
        raise ConfigError(_describe(error)) from error


def parse_config(path: str | Path) -> ExperimentConfig:
    """
    Reads and validates a YAML experiment config; unknown keys are rejected.

    Args:
        path (str | Path): Config file.

    Returns:
        ExperimentConfig: The resolved config.

    Raises:
        ConfigError: If the file is missing, is not valid YAML, or fails validation.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as error:
        raise ConfigError(f"{path} is not valid YAML: {error}") from error
    return validate_config(data)


def with_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """
    Re-validates ``cfg`` after setting dotted keys, e.g. ``{"attack.malicious_fraction": 0.3}``.

    Raises:
        ConfigError: If the overridden config is invalid.
    """
    data = cfg.model_dump(mode="json")
    for dotted, value in overrides.items():
        node = data
        *parents, leaf = dotted.split(".")
        for part in parents:
            if node.get(part) is None:
                raise ConfigError(f"{dotted}: section '{part}' is not configured")
            node = node[part]
        node[leaf] = value
    return validate_config(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)
