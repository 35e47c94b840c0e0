"""
Configuration management for the training-time toolkit
Handles environment variables and numerical defaults shared by every stage
"""

import os
from functools import lru_cache

from pydantic import ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings

from .. import __version__


class ApplicationSettings(BaseSettings):
    """Toolkit configuration with environment variable support"""

    # Application Info
    application_name: str = "Training Time Toolkit"
    application_version: str = __version__
    debug_mode: bool = False
    environment: str = "development"

    # Logging Configuration
    log_level: str = "INFO"
    # File handler line format; run_id and execution_time come from PerformanceFilter
    log_format: str = (
        "%(asctime)s | %(name)-24s | %(levelname)-8s | %(run_id)s | %(execution_time)s | %(message)s"
    )
    enable_file_logging: bool = False
    log_file_path: str = "./logs/ttime.log"

    # Random projection
    default_projection_dim: int = 2000
    default_sparsity: float = 2.0 / 3.0
    projection_block_columns: int = 4096
    max_unprojected_dim: int = 200_000

    # ODE / SDE solvers
    rk4_substeps: int = 4
    rk4_max_substeps: int = 64
    rk4_refinement_tolerance: float = 1e-8
    divergence_threshold: float = 1e12
    sde_smoothing_half_window: int = 2
    ode_smoothing_half_window: int = 0

    # Larger-dataset extrapolation
    extrapolation_alpha: float = 0.15
    extrapolation_k0: int = 100
    powerlaw_fit_fraction: float = 0.8
    bisection_lower: float = 1e-6
    bisection_upper: float = 20.0
    bisection_tolerance: float = 1e-10

    # Kernel / eigen tolerances
    symmetry_tolerance: float = 1e-10
    negative_eigenvalue_tolerance: float = 1e-8
    kernel_text_dump_max: int = 64
    jacobi_max_sweeps: int = 100

    # Performance Settings
    max_workers: int = 4

    @field_validator("default_sparsity")
    @classmethod
    def validate_sparsity(cls, value: float) -> float:
        """Sparsity is the probability of a zero entry"""
        if not 0.0 <= value < 1.0:
            raise ValueError("Sparsity must be in [0, 1)")
        return value

    @field_validator("extrapolation_alpha")
    @classmethod
    def validate_alpha(cls, value: float) -> float:
        if not 0.0 <= value <= 1.0:
            raise ValueError("Extrapolation alpha must be between 0.0 and 1.0 inclusive")
        return value

    @field_validator(
        "default_projection_dim",
        "projection_block_columns",
        "rk4_substeps",
        "rk4_max_substeps",
        "extrapolation_k0",
        "max_workers",
        "jacobi_max_sweeps",
    )
    @classmethod
    def validate_positive_int(cls, value: int) -> int:
        if value < 1:
            raise ValueError("Value must be a positive integer")
        return value

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, value: str) -> str:
        """Validate log level"""
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if value.upper() not in valid_levels:
            raise ValueError(f"Log level must be one of: {valid_levels}")
        return value.upper()

    @model_validator(mode="after")
    def validate_substep_bounds(self) -> "ApplicationSettings":
        if self.rk4_substeps > self.rk4_max_substeps:
            raise ValueError("rk4_substeps must not exceed rk4_max_substeps")
        if self.bisection_lower >= self.bisection_upper:
            raise ValueError("bisection_lower must be below bisection_upper")
        return self

    model_config = {
        "env_file": ".env",
        "env_file_encoding": "utf-8",
        "case_sensitive": False,
        "env_prefix": "TTIME_",
        "validate_assignment": True,
    }


class DevelopmentSettings(ApplicationSettings):
    """Development environment configuration"""
    debug_mode: bool = True
    log_level: str = "DEBUG"
    environment: str = "development"


class ProductionSettings(ApplicationSettings):
    """Production environment configuration for batch sweeps"""
    debug_mode: bool = False
    log_level: str = "INFO"
    enable_file_logging: bool = True
    environment: str = "production"


class TestingSettings(ApplicationSettings):
    """Testing environment configuration"""
    debug_mode: bool = True
    log_level: str = "DEBUG"
    enable_file_logging: bool = False
    environment: str = "testing"

    # Keep the test suite light on threads
    max_workers: int = 2


@lru_cache()
def get_application_settings() -> ApplicationSettings:
    """Get application settings based on environment with error handling"""
    environment = os.getenv("ENVIRONMENT", "development").lower()

    try:
        if environment == "production":
            return ProductionSettings()
        elif environment == "testing":
            return TestingSettings()
        else:
            return DevelopmentSettings()
    except ValidationError as e:
        print(f"Configuration validation error: {e}")
        print("Using development settings with default values")
        return DevelopmentSettings()


def validate_configuration() -> bool:
    """Validate current configuration and return True if valid"""
    try:
        if settings.divergence_threshold <= 0:
            print("ERROR: divergence_threshold must be positive")
            return False

        if settings.rk4_refinement_tolerance <= 0 or settings.bisection_tolerance <= 0:
            print("ERROR: solver tolerances must be positive")
            return False

        if not 0.0 < settings.powerlaw_fit_fraction <= 1.0:
            print("ERROR: powerlaw_fit_fraction must be in (0, 1]")
            return False

        return True

    except Exception as e:
        print(f"Configuration validation failed: {e}")
        return False


# Global settings instance
settings = get_application_settings()

# Validate configuration on import
if not validate_configuration():
    print("WARNING: Configuration validation failed. Check environment variables.")
