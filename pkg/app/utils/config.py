"""Configuration management for the IPA ASR toolkit."""

import tomllib
from pathlib import Path
from typing import Any, Dict, Optional
from pydantic_settings import BaseSettings
from pydantic import Field
from pydantic_settings import SettingsConfigDict
from functools import lru_cache

from app.utils.errors import ParseError, ValidationError

VALID_LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class Settings(BaseSettings):
    """Application settings."""

    # Application settings
    app_name: str = Field(default="IPA ASR Toolkit", alias="APP_NAME")
    app_version: str = Field(default="0.1.0", alias="APP_VERSION")
    debug: bool = Field(default=False, alias="DEBUG")

    # Server settings (serve subcommand)
    host: str = Field(default="127.0.0.1", alias="HOST")
    port: int = Field(default=8000, alias="PORT")

    # Logging settings
    log_level: str = Field(default="INFO", alias="LOG_LEVEL")
    log_file: Optional[str] = Field(default=None, alias="LOG_FILE")

    # Pipeline settings
    jobs: int = Field(default=1, alias="IPA_ASR_JOBS")

    # HTTP surface resources
    inventory_path: Optional[str] = Field(default=None, alias="IPA_ASR_INVENTORY")
    translit_path: Optional[str] = Field(default=None, alias="IPA_ASR_TRANSLIT")

    model_config = SettingsConfigDict(env_file=".env", env_file_encoding="utf-8", case_sensitive=False, extra="ignore")


@lru_cache()
def get_settings() -> Settings:
    """Get cached application settings."""
    return Settings()


def validate_settings(settings: Settings) -> None:
    """Validate application settings."""
    if settings.jobs < 1:
        raise ValidationError("IPA_ASR_JOBS", settings.jobs, "Must be at least 1")

    if settings.log_level.upper() not in VALID_LOG_LEVELS:
        raise ValidationError("LOG_LEVEL", settings.log_level, f"Must be one of {', '.join(VALID_LOG_LEVELS)}")


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    """Read a flat TOML config file; a missing path yields an empty mapping."""
    if not path:
        return {}
    config_path = Path(path)
    if not config_path.exists():
        raise ParseError("config file not found", source=str(config_path))
    try:
        with open(config_path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ParseError(f"invalid config: {e}", source=str(config_path)) from e

    nested = [key for key, value in data.items() if isinstance(value, dict)]
    if nested:
        raise ParseError(f"config must be flat key = value, found tables {nested}", source=str(config_path))
    return data


def merge_overrides(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Apply command-line overrides on top of file values, ignoring unset flags."""
    result = dict(base)
    result.update({key: value for key, value in overrides.items() if value is not None})
    return result

