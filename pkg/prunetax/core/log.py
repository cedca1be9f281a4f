"""Logging setup: stdlib loggers rendered through rich."""

from __future__ import annotations

import logging
from typing import Optional

from rich.console import Console
from rich.logging import RichHandler

from prunetax.core.precision import default_log_level


def configure_logging(verbose: bool = False, console: Optional[Console] = None) -> None:
    """
    Route the prunetax logger hierarchy to a RichHandler.

    --verbose forces DEBUG; otherwise PRUNETAX_LOG_LEVEL (default WARNING).
    Safe to call more than once.
    """
    level = logging.DEBUG if verbose else getattr(logging, default_log_level().upper(), logging.WARNING)
    root = logging.getLogger("prunetax")
    root.setLevel(level)
    for handler in list(root.handlers):
        if isinstance(handler, RichHandler):
            root.removeHandler(handler)
    handler = RichHandler(
        console=console or Console(stderr=True),
        show_path=verbose,
        rich_tracebacks=True,
        markup=False,
    )
    handler.setFormatter(logging.Formatter("%(name)s: %(message)s"))
    root.addHandler(handler)
    root.propagate = False
