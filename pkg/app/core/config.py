"""
Configuration management using Pydantic BaseSettings.

This module handles process-level settings (environment, logging, the
checkpoint served over HTTP). Numerical run parameters live in the JSON
run config (see app.schemas.config); nothing here changes numerics.
"""

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """
    Application settings loaded from environment variables.

    Environment variables are loaded from .env file automatically.
    """

    # Application environment
    env: str = "development"

    # Root logger level used by the CLI and the HTTP service
    log_level: str = "INFO"

    # Checkpoint loaded by the HTTP service on startup
    checkpoint_path: str = ""

    # HTTP service binding
    host: str = "0.0.0.0"
    port: int = 8000
    cors_origins: list[str] = ["http://localhost:3000"]

    class Config:
        """Pydantic configuration."""

        env_file = ".env"
        env_file_encoding = "utf-8"
        case_sensitive = False


# Global settings instance
settings = Settings()
