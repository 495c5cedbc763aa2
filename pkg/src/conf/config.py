from typing import Any

from pydantic import ConfigDict, Field, field_validator
from pydantic_settings import BaseSettings


LOG_LEVELS = ["TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR", "CRITICAL"]


class Settings(BaseSettings):
    LOG_LEVEL: str = "INFO"
    LOG_FILE: str | None = None
    OUTPUT_DIR: str = "results"
    WORKERS: int = Field(default=1, ge=1)
    SERIAL: bool = True

    model_config = ConfigDict(
        extra="ignore", env_file=".env", env_file_encoding="utf-8"
    )  # noqa

    @field_validator("LOG_LEVEL")
    @classmethod
    def validate_log_level(cls, v: Any):
        v = str(v).upper()
        if v not in LOG_LEVELS:
            raise ValueError(f"log level must be one of {', '.join(LOG_LEVELS)}")
        return v


config = Settings()
