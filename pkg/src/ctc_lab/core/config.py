"""
Configuration management for CTC Lab.
"""
from pydantic import BaseSettings, Field, validator


class Settings(BaseSettings):
    """Process settings loaded from environment variables."""

    service_name: str = Field(default="ctc-lab", env="CTCLAB_SERVICE_NAME")

    # Default seed for every command that does not receive one explicitly
    seed: int = Field(default=0, env="CTCLAB_SEED")

    # Logging
    log_level: str = Field(default="INFO", env="CTCLAB_LOG_LEVEL")
    log_json: bool = Field(default=True, env="CTCLAB_LOG_JSON")

    # Prometheus textfile written next to run outputs
    metrics_enabled: bool = Field(default=False, env="CTCLAB_METRICS_ENABLED")
    metrics_filename: str = Field(default="metrics.prom", env="CTCLAB_METRICS_FILENAME")

    # MINE restarts after a non-finite statistics network
    mine_retry_count: int = Field(default=3, env="CTCLAB_MINE_RETRY_COUNT")

    # Parallel MINE jobs per evaluated epoch
    mi_workers: int = Field(default=1, env="CTCLAB_MI_WORKERS")

    class Config:
        env_file = ".env"
        case_sensitive = False

    @validator("log_level")
    def _known_level(cls, value: str) -> str:
        level = value.upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"unknown log level {value!r}")
        return level

    @validator("mine_retry_count", "mi_workers")
    def _at_least_one(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value


settings = Settings()


def get_settings() -> Settings:
    """Get the global settings instance."""
    return settings
