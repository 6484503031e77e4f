"""Common configuration helpers shared across entry points."""
from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Optional

CONFIG_ENV_VAR = "CONVDRAW_CONFIG"
LOG_LEVEL_ENV_VAR = "CONVDRAW_LOG_LEVEL"
DEFAULT_LOG_LEVEL = "INFO"
DEFAULT_SEED = 1234
LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"


def resolve_config_path(explicit_path: Path | str | None = None) -> Optional[Path]:
    """Locate the ``key = value`` run file shared by every subcommand.

    Parameters
    ----------
    explicit_path:
        The ``--config`` argument. When ``None``, ``CONVDRAW_CONFIG`` is
        consulted; without either, ``None`` is returned and the ``model.*``,
        ``train.*`` and ``data.*`` defaults apply, before any ``--set``
        overrides.
    """

    if explicit_path is not None:
        return Path(explicit_path).expanduser()

    env_path = os.getenv(CONFIG_ENV_VAR)
    if env_path:
        return Path(env_path).expanduser()

    return None


def resolve_log_level(flag: Optional[str] = None, configured: Optional[str] = None) -> str:
    """Flag beats ``CONVDRAW_LOG_LEVEL`` beats the config file beats INFO."""

    for candidate in (flag, os.getenv(LOG_LEVEL_ENV_VAR), configured):
        if candidate:
            return candidate.upper()
    return DEFAULT_LOG_LEVEL


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
    )
