from typing import Optional
from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import field_validator


class Settings(BaseSettings):
    """Process settings loaded from environment variables."""

    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True, extra="ignore")

    PROJECT_NAME: str = "DAMA Engine"
    DEBUG: bool = False
    LOG_LEVEL: str = "INFO"

    # Output root override for every CLI command
    DAMA_OUTPUT_ROOT: Optional[str] = None

    DEFAULT_SEED: int = 0

    @field_validator("LOG_LEVEL", mode="before")
    @classmethod
    def normalize_log_level(cls, v):
        if isinstance(v, str) and v:
            return v.upper()
        return "INFO"

    def resolve_output(self, path: str | Path) -> Path:
        """Resolve a relative output path against the output root, if one is set."""
        path = Path(path)
        if self.DAMA_OUTPUT_ROOT and not path.is_absolute():
            return Path(self.DAMA_OUTPUT_ROOT) / path
        return path


settings = Settings()
