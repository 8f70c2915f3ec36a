import logging
from pydantic_settings import BaseSettings, SettingsConfigDict
from functools import lru_cache

class Settings(BaseSettings):
    """
    Manages lp-lab settings loaded from a .env file or the environment.
    """
    # Load from .env file
    model_config = SettingsConfigDict(env_file=".env", extra="ignore")

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FILE: str = "lp_lab.log"

    # Grid
    GRID_SAMPLE_BUDGET: int = 2 ** 20
    CLOSURE_CAP_SCALE: int = 0

    # Filters and lacunary families
    DECAY_EXPONENT: float = 100.0
    SMOOTHNESS_ORDER: int = 10
    MIN_HAAR_CELLS: int = 2
    MIN_SMOOTH_CELLS: int = 8
    FFT_WORKERS: int = 1

    # Stopping times and sparse families
    EXCEPTIONAL_EXPONENT: float = 10.0
    EXCEPTIONAL_BUDGET: float = 0.1

    # Weights
    STABILITY_TOLERANCE: float = 0.1
    STABILITY_REFINEMENT: int = 8

    # Experiments
    SIZE_EPSILON: float = 0.1
    FJ_MAX_ITERATIONS: int = 12
    OUTPUT_DIR: str = "runs"

@lru_cache()
def get_settings() -> Settings:
    """
    Returns a cached instance of the settings.
    This ensures the .env file is read only once.
    """
    logging.info("Loading application settings...")
    try:
        settings = Settings()
        return settings
    except Exception as e:
        logging.error(f"Error loading settings: {e}")
        raise

# Instantiate settings once
settings = get_settings()
