from __future__ import annotations

import logging

from rich.console import Console
from rich.logging import RichHandler


console = Console()

_CONFIGURED = False


def setup_logging(verbose: bool = False) -> None:
    global _CONFIGURED
    level = logging.DEBUG if verbose else logging.INFO
    root = logging.getLogger("stereo_recon")
    root.setLevel(level)
    if _CONFIGURED:
        return
    handler = RichHandler(console=console, show_path=False, rich_tracebacks=True)
    handler.setFormatter(logging.Formatter("%(message)s", datefmt="[%X]"))
    root.addHandler(handler)
    root.propagate = False
    _CONFIGURED = True
