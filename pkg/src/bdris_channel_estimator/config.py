"""
BD-RIS Channel Estimator Configuration
======================================

This module contains the process-level settings (environment driven) and the
application logger shared by every module of the package.
"""

import os
import logging
from dotenv import load_dotenv
from pydantic import BaseModel

load_dotenv()


class Settings(BaseModel):
    """Settings for the BD-RIS channel estimator."""

    APP_NAME: str = "bdris-channel-estimator"
    APP_VERSION: str = "0.1.0"
    APP_DESCRIPTION: str = (
        "Three-stage cascaded channel estimation simulator for group-connected "
        "BD-RIS multi-user mmWave uplinks"
    )
    DEPENDENCIES: list[str] = [
        "mcp[cli]",
        "anyio",
        "pydantic",
        "python-dotenv",
        "numpy",
        "scipy",
        "joblib",
        "toml",
    ]
    HOST: str = os.getenv("HOST", "0.0.0.0")
    PORT: int = int(os.getenv("PORT", "8050"))
    CACHE_MAX_AGE: int = int(os.getenv("CACHE_MAX_AGE", "3600"))
    CACHE_MAX_ENTRIES: int = int(os.getenv("CACHE_MAX_ENTRIES", "16"))
    TRANSPORT: str = os.getenv("TRANSPORT", "stdio")
    # LOG_FILE can be set to a writable path, or disabled by setting to "" or None
    LOG_FILE: str | None = os.getenv("LOG_FILE", "") or None
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO").upper()
    # 0 means one worker per available core
    THREADS: int = int(os.getenv("THREADS", "0"))
    ELEMENT_BUDGET: float = float(os.getenv("ELEMENT_BUDGET", "1e9"))

    APP_INSTRUCTIONS: str = """This MCP server runs channel estimation experiments for group-connected BD-RIS systems.

# Getting Started
1. Use `describe_config` to inspect the desk or published scenario
2. Use `run_trial` to run one Monte Carlo trial and get per-estimator NMSE
3. Use `run_sweep` to sweep SNR, pilot budget, path counts or array sizes
4. Use `run_selftest` to execute the identity and oracle checks

All tools return JSON strings that can be parsed for further processing.
"""


# Create a settings instance for importing elsewhere
settings = Settings()


def configure_logger():
    """Configure and return the application logger."""
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    logger = logging.getLogger(settings.APP_NAME)
    # Try to add a file handler if LOG_FILE is set
    if settings.LOG_FILE:
        try:
            file_handler = logging.FileHandler(settings.LOG_FILE)
            file_handler.setFormatter(
                logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s")
            )
            logger.addHandler(file_handler)
        except Exception as e:
            logger.warning(
                f"Could not set up file logging to {settings.LOG_FILE}: {e}\n"
                "Falling back to console logging only."
            )
    logger.setLevel(getattr(logging, settings.LOG_LEVEL, logging.INFO))
    return logger


logger = configure_logger()
