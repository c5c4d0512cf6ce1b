import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import yaml

from config import config
from logs.logger import logger
from src.exceptions import InvalidConfigError
from src.models import ExperimentConfig, layer_preset


KEY_VALUE_LINE = re.compile(r"^[A-Za-z_]\w*\s*=")

# Independent RNG streams derived from a run seed.
BATCH_STREAM = 1
VIEW_STREAM = 2


def derive_seed(*keys: int) -> int:
    """
    Deterministic 32-bit seed from a tuple of non-negative integers.

    Args:
        keys: e.g. (base_seed, stream, epoch, step).

    Returns:
        First word of the SeedSequence state for `keys`.
    """
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def parse_overrides(items: Optional[List[str]]) -> Dict[str, Any]:
    """
    Parses `key=value` strings; values follow YAML scalar rules.

    Raises:
        InvalidConfigError: If an item has no '=' or an empty key.
    """
    overrides: Dict[str, Any] = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise InvalidConfigError(f"override '{item}' is not of the form key=value")
        try:
            overrides[key] = yaml.safe_load(raw) if raw.strip() else None
        except yaml.YAMLError as e:
            raise InvalidConfigError(f"override '{item}' has an unparsable value: {e}") from e
    return overrides


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Reads a flat experiment file of `key=value` lines.

    Blank lines and `#` comments are skipped; values follow YAML scalar
    rules. A file without `key=` lines is read as a flat YAML `key: value`
    mapping instead.

    Raises:
        OSError: If the file cannot be read.
        InvalidConfigError: If it is not a flat mapping.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    lines = [line.strip() for line in text.splitlines()]
    lines = [line for line in lines if line and not line.startswith("#")]
    if any(KEY_VALUE_LINE.match(line) for line in lines):
        return parse_overrides(lines)
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise InvalidConfigError(f"'{path}' is neither key=value nor key: value text: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise InvalidConfigError(f"'{path}' must hold a key: value mapping")
    nested = [key for key, value in data.items() if isinstance(value, (dict, list))]
    if nested:
        raise InvalidConfigError(f"'{path}' must be flat, nested values under {nested}")
    return data


def build_experiment_config(values: Dict[str, Any]) -> ExperimentConfig:
    """Schema defaults < config.yaml experiment block < preset fields < `values`."""
    try:
        return ExperimentConfig(**layer_preset(config.section("experiment"), values))
    except ValueError as e:
        raise InvalidConfigError(f"invalid experiment config: {e}") from e


def load_experiment_config(path: Optional[Union[str, Path]] = None,
                           overrides: Optional[List[str]] = None) -> ExperimentConfig:
    """
    Resolves an experiment config from an optional file and `--set` overrides.

    Raises:
        InvalidConfigError: Unknown keys, bad values or malformed overrides.
        OSError: Unreadable config file.
    """
    values = read_config_file(path) if path is not None else {}
    values.update(parse_overrides(overrides))
    cfg = build_experiment_config(values)
    logger.info(f"Resolved experiment config from {path or 'defaults'} with {len(overrides or [])} overrides")
    return cfg


def write_resolved_config(cfg: ExperimentConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.serialize(), f, sort_keys=False)
    return path
