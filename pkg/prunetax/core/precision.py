"""
Arithmetic precision and environment settings.

Verification mode (PRUNETAX_VERIFY=1) forces 64-bit floats everywhere so
finite-difference checks have headroom. Training mode runs in 32-bit.
Settings are read from the environment, with a .env file honoured.
"""

from __future__ import annotations

import os

import numpy as np
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

VERIFY_ENV = "PRUNETAX_VERIFY"
LOG_LEVEL_ENV = "PRUNETAX_LOG_LEVEL"


def verify_mode() -> bool:
    """True when 64-bit verification mode is requested."""
    return os.getenv(VERIFY_ENV, "0").strip().lower() in ("1", "true", "yes", "on")


def default_dtype() -> np.dtype:
    """Float dtype for newly built networks and loaded datasets."""
    return np.dtype(np.float64) if verify_mode() else np.dtype(np.float32)


def default_log_level() -> str:
    """Log level used when the CLI is not given --verbose."""
    return os.getenv(LOG_LEVEL_ENV, "WARNING").upper()
