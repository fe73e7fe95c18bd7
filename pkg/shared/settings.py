from functools import lru_cache
from typing import Literal

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-level settings, read from STOCHCOV_* environment variables or .env"""

    model_config = SettingsConfigDict(env_prefix="STOCHCOV_", env_file=".env", env_file_encoding="utf-8", extra="ignore")

    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = Field(default="INFO")
    output_dir: str = Field(default="./runs", description="Default root for run output directories")
    workers: int = Field(default=1, ge=1, description="Worker threads for ensembles and per-segment integrations")
    quiet: bool = Field(default=False, description="Silence warnings and library logs")


@lru_cache
def get_settings() -> Settings:
    return Settings()
