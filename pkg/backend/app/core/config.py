"""
Configuration management using pydantic-settings.
Reads from .env file and environment variables.
"""
from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Literal
from pathlib import Path

# Get project root directory
PROJECT_ROOT = Path(__file__).parent.parent.parent.parent
ENV_FILE = PROJECT_ROOT / ".env"


class Settings(BaseSettings):
    """Application settings."""

    model_config = SettingsConfigDict(
        env_file=str(ENV_FILE),
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore"
    )

    # Server
    PORT: int = 8000
    HOST: str = "0.0.0.0"
    LOG_LEVEL: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"

    # Rational algebra
    CANCEL_TOL: float = 1e-8  # relative to coefficient magnitude
    STAB_EPS: float = 1e-9
    MAX_DEGREE: int = 60
    HINF_TOL: float = 1e-6

    # Frequency grids (rad/s)
    GRID_POINTS: int = 200
    GRID_W_MIN: float = 1e-3
    GRID_W_MAX: float = 1e3
    CHECK_GRID_POINTS: int = 50
    GRID_TOL: float = 1e-8
    BEZOUT_TOL: float = 1e-8  # hard failure

    # Factorization and design
    FACTOR_POLE: float = 1.0
    PADE_ORDER: int = 3
    BASIS_DEGREE: int = 8
    BASIS_POLE: float = 0.1
    COEF_BOUND: float = 1e4
    DESIGN_WORKERS: int = 1

    # Simulation
    SIM_DT: float = 1e-3
    SIM_METHOD: Literal["bilinear", "zoh"] = "bilinear"
    DIVERGENCE_LIMIT: float = 1e9


# Global settings instance
settings = Settings()
