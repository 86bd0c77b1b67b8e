from dataclasses import dataclass
import os
from typing import Optional

from dotenv import load_dotenv

_LOG_LEVELS = {"DEBUG", "INFO", "WARNING", "ERROR"}

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"


@dataclass(frozen=True)
class Settings:
    seed_override: Optional[int]
    log_level: str
    runs_dir: str


def load_settings() -> Settings:
    load_dotenv()
    raw_seed = os.getenv("SRPO_SEED", "").strip()
    log_level = os.getenv("SRPO_LOG_LEVEL", "INFO").strip().upper()
    runs_dir = os.getenv("SRPO_RUNS_DIR", "runs").strip()

    seed_override: Optional[int] = None
    if raw_seed:
        try:
            seed_override = int(raw_seed)
        except ValueError as exc:
            raise RuntimeError("SRPO_SEED must be an integer.") from exc
        if seed_override < 0:
            raise RuntimeError("SRPO_SEED must be >= 0.")
    if log_level not in _LOG_LEVELS:
        raise RuntimeError(f"SRPO_LOG_LEVEL must be one of {sorted(_LOG_LEVELS)}.")
    if not runs_dir:
        raise RuntimeError("SRPO_RUNS_DIR must not be empty.")

    return Settings(
        seed_override=seed_override,
        log_level=log_level,
        runs_dir=runs_dir,
    )
