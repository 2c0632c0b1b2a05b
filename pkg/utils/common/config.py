"""
Runtime settings loaded from environment variables or a .env file.
"""

from typing import Optional

from pydantic import AliasChoices, Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class RuntimeSettings(BaseSettings):
    """Process-level knobs that do not belong in an experiment config."""

    threads: int = Field(default=1, ge=1, validation_alias=AliasChoices("DWNAS_THREADS", "TNAS_THREADS"))
    log_level: str = "INFO"
    log_to_file: bool = False
    log_file: str = "transformable_nas.log"

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="TNAS_",
        case_sensitive=False,
        extra="ignore",
        populate_by_name=True
    )


_runtime_settings_cache: Optional[RuntimeSettings] = None


def get_runtime_settings(refresh: bool = False) -> RuntimeSettings:
    """
    Get runtime settings (cached after the first call).

    Args:
        refresh: Re-read the environment instead of using the cache

    Returns:
        RuntimeSettings instance
    """
    global _runtime_settings_cache
    if _runtime_settings_cache is None or refresh:
        _runtime_settings_cache = RuntimeSettings()
    return _runtime_settings_cache
