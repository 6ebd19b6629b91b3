"""
longview - longitudinal mammography pair classification.
Configuration module for environment variables and settings.
"""
from functools import lru_cache
from pathlib import Path

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-level settings.

    Command flags are the only source of run configuration. The environment
    is read for ``LV_THREADS`` (worker parallelism) and for diagnostics-only
    logging options, none of which change any output file.
    """

    model_config = SettingsConfigDict(env_prefix="LV_", extra="ignore")

    # Application
    app_name: str = "longview"
    version: str = "1.0.0"

    # Parallelism
    threads: int = Field(default=1, ge=1)

    # Logging
    log_dir: Path = Path(__file__).resolve().parent / "logs"
    log_level: str = "INFO"


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()
