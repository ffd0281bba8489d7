"""
Environment settings for the geometry toolkit.

Values come from the process environment, optionally seeded from a `.env`
file in the working directory.
"""

import logging
import os
from typing import Optional

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
DEFAULT_RESOLUTION = 768


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        logging.warning(f"Ignoring non-integer {name}={raw!r}")
        return default


def resolve_threads(requested: Optional[int] = None) -> int:
    """Worker count: explicit request, else HUG_GEOM_THREADS, where 0 means all cores."""
    threads = _env_int("HUG_GEOM_THREADS", 0) if requested is None else int(requested)
    if threads <= 0:
        threads = os.cpu_count() or 1
    return max(1, threads)


def default_resolution() -> int:
    return max(1, _env_int("HUG_GEOM_RESOLUTION", DEFAULT_RESOLUTION))


def log_level(verbose: bool = False) -> int:
    if verbose:
        return logging.DEBUG
    name = os.getenv("HUG_GEOM_LOG_LEVEL", "INFO").upper()
    return getattr(logging, name, logging.INFO)


def setup_logging(verbose: bool = False) -> None:
    logging.basicConfig(level=log_level(verbose), format=LOG_FORMAT)
