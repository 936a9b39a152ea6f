"""
config.py – Runtime settings loaded from environment variables (NANOFLOW_*)
and the process-wide logging setup.
"""

import logging
from functools import lru_cache

from pydantic_settings import BaseSettings, SettingsConfigDict

LOG_FORMAT = "%(asctime)s | %(levelname)-8s | %(name)s | %(message)s"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"


class Settings(BaseSettings):
    # ── Output locations ─────────────────────────────────────────────────────
    OUTPUT_DIR: str = "runs"
    MODEL_DIR: str = "runs/checkpoints"     # checkpoint root served over HTTP

    # ── Execution ────────────────────────────────────────────────────────────
    LOG_LEVEL: str = "INFO"
    THREADS: int = 1
    DEFAULT_SEED: int = 0
    IO_RETRY_ATTEMPTS: int = 3

    # ── HTTP service ─────────────────────────────────────────────────────────
    PORT: int = 8000
    ALLOWED_ORIGINS: str = "*"          # comma-separated list or "*"

    model_config = SettingsConfigDict(
        env_prefix="NANOFLOW_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    @property
    def origins(self) -> list[str]:
        parts = [o.strip() for o in self.ALLOWED_ORIGINS.split(",") if o.strip()]
        return ["*"] if not parts or "*" in parts else parts


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings()


def configure_logging(level: str | None = None) -> None:
    logging.basicConfig(
        level=(level or get_settings().LOG_LEVEL).upper(),
        format=LOG_FORMAT,
        datefmt=LOG_DATEFMT,
    )
