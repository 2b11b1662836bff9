from __future__ import annotations

import os
from functools import lru_cache

from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env", env_file_encoding="utf-8", env_prefix="LTKD_", extra="ignore"
    )

    threads: int | None = None
    log_level: str = "INFO"
    output_dir: str = "runs"

    @field_validator("threads")
    @classmethod
    def _positive_threads(cls, value: int | None) -> int | None:
        if value is not None and value < 1:
            raise ValueError("LTKD_THREADS must be at least 1")
        return value

    @property
    def worker_count(self) -> int:
        return self.threads or os.cpu_count() or 1


@lru_cache
def get_settings() -> Settings:
    return Settings()

# Note: tests that change LTKD_* variables must call get_settings.cache_clear()
