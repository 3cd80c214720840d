#!/usr/bin/env python3
"""
Logging setup for the Smart Meter Network Simulator

Library modules only call logging.getLogger(__name__); the entry point decides
where records go by calling configure_logging() once.
"""

import logging
from typing import Optional

from rich.console import Console
from rich.logging import RichHandler

console = Console(highlight=False)
error_console = Console(stderr=True, highlight=False)


def configure_logging(verbosity: int = 0, quiet: bool = False,
                      log_console: Optional[Console] = None) -> None:
    """Route all simulator logging through a rich handler"""
    if quiet:
        level = logging.WARNING
    elif verbosity >= 1:
        level = logging.DEBUG
    else:
        level = logging.INFO

    handler = RichHandler(
        console=log_console or error_console,
        show_path=False,
        rich_tracebacks=True,
        markup=False,
    )
    logging.basicConfig(level=level, format="%(name)s: %(message)s",
                        datefmt="[%X]", handlers=[handler], force=True)


def status(message: str, quiet: bool = False) -> None:
    """Print a user-facing status line unless quiet"""
    if not quiet:
        console.print(message, markup=False, soft_wrap=True)
