from pathlib import Path
from typing import Any, Dict, Type, TypeVar

import yaml


T = TypeVar('T')

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent / "config.yaml"


class Config:
    """
    Singleton holding the project configuration.

    Loads `config/config.yaml` once and gives dot-notation access to it,
    e.g. `config.get("experiment.tau_s")`.
    """
    _instance = None

    def __new__(cls: Type[T], config_path: Path = DEFAULT_CONFIG_PATH) -> T:
        """
        Returns the single Config instance, loading the YAML on first use.

        Args:
            config_path: Path to the YAML configuration file.

        Returns:
            The shared Config instance.
        """
        if cls._instance is None:
            cls._instance = super(Config, cls).__new__(cls)
            cls._instance._load_config(config_path)
        return cls._instance

    def _load_config(self, config_path: Path) -> None:
        """
        Loads the configuration from the YAML file.

        Args:
            config_path: Path to the configuration file.

        Raises:
            FileNotFoundError: If the configuration file does not exist.
        """
        self.path = Path(config_path)
        if not self.path.exists():
            raise FileNotFoundError(f"Config file not found: {self.path}")
        with open(self.path, "r", encoding="utf-8") as f:
            self.config = yaml.safe_load(f) or {}

    def get(self, key: str, default: Any = None) -> Any:
        """
        Reads a configuration value with dot notation.

        Args:
            key: Dotted key, e.g. "output.metrics".
            default: Value returned when the key is missing.

        Returns:
            The configured value or `default`.
        """
        keys = key.split(".")
        value = self.config
        for k in keys:
            if isinstance(value, dict):
                value = value.get(k, default)
            else:
                return default
        return value

    def section(self, key: str) -> Dict[str, Any]:
        """
        Returns a copy of a mapping section, empty when it is missing.

        Args:
            key: Dotted key of the section.

        Returns:
            Shallow copy of the section dictionary.
        """
        value = self.get(key, {})
        return dict(value) if isinstance(value, dict) else {}

    def __repr__(self) -> str:
        return f"<Config path={self.path}>"
