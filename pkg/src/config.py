"""
Configuration management using Pydantic Settings.
Reads process-level knobs from environment variables (and an optional .env).

Scenario, solver and training parameters are NOT settings: they travel with
each experiment as pydantic models (see src.instance, src.pmm, src.ilo).
"""

import os

from pydantic import ConfigDict, Field
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """Application settings."""

    model_config = ConfigDict(env_file=".env", case_sensitive=False, extra="ignore")

    # Parallelism
    irac_threads: int = Field(default=os.cpu_count() or 1, alias="IRAC_THREADS", ge=1)

    # Application Configuration
    environment: str = Field(default="development", alias="ENVIRONMENT")
    log_level: str = Field(default="INFO", alias="LOG_LEVEL")
    default_profile: str = Field(default="paper-truck", alias="IRAC_PROFILE")

    # Decision service
    model_path: str | None = Field(default=None, alias="IRAC_MODEL_PATH")

    # Fast-path circuit breaker
    fast_path_failure_threshold: int = Field(default=5, alias="FAST_PATH_FAILURE_THRESHOLD")
    fast_path_recovery_timeout: float = Field(default=60.0, alias="FAST_PATH_RECOVERY_TIMEOUT")

    def cap_workers(self, requested: int | None) -> int:
        """Requested parallelism (default: all allowed threads), never above IRAC_THREADS."""
        return max(1, min(requested or self.irac_threads, self.irac_threads))


# Global settings instance
settings = Settings()
