"""Shared rich console and logging setup."""

import logging
import os
from typing import Optional

from rich.console import Console
from rich.logging import RichHandler

# Diagnostics go to stderr so result tables on stdout stay clean.
console = Console(stderr=True)

LOG_LEVEL_ENV = "BLOCKCLR_LOG_LEVEL"


def configure_logging(level: Optional[str] = None) -> None:
    """Route library logging through a RichHandler.

    The level comes from the argument, then ``BLOCKCLR_LOG_LEVEL``, then INFO.
    """
    level_name = (level or os.getenv(LOG_LEVEL_ENV) or "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=True, show_path=False)],
        force=True,
    )
