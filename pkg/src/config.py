"""
Configuration management for factorlab.
"""

import math
from typing import Optional

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """Application settings."""

    # System Settings
    debug: bool = False
    log_level: str = "INFO"

    # Tolerances
    symmetry_rel_tol: float = 1e-9  # relative to the mean cell mass
    total_rel_tol: float = 1e-9  # equal-totals precondition of balance
    balance_rel_tol: float = 1e-9  # per-target residual accepted by verify_balance
    prokhorov_tol: float = 1e-4  # bracket width of the shell scan

    # Factor point process extraction
    m_max: int = 64
    retry_limit: int = 3
    quantize_safety: float = 2.0
    encoding_weight: float = math.sqrt(2.0)

    # Measures
    atom_subgrid_bits: int = 20
    fiber_atom_radius: int = 1

    # Debug output of the Prokhorov bisection, written only in debug mode
    prokhorov_trace_path: Optional[str] = None

    # Campaigns
    corpus_dir: str = "./corpus"
    jobs: int = 1

    class Config:
        env_prefix = "FACTORLAB_"
        env_file = ".env"
        env_file_encoding = "utf-8"


# Global settings instance
settings = Settings()
