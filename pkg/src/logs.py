"""Logger setup shared by every module."""

import logging
import sys

_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
_configured = False


def configure_logging(level: str = None) -> None:
    """Install a single stderr handler on the package root logger."""
    global _configured
    from .config import LOG_LEVEL

    root = logging.getLogger("src")
    root.setLevel((level or LOG_LEVEL).upper())
    if not _configured:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(_FORMAT))
        root.addHandler(handler)
        _configured = True


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(name)
