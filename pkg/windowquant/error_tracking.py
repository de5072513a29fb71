"""
WindowQuant -- Error tracking: a logging handler that persists ERROR+ records as JSON
lines so failed runs leave a machine-readable trail next to their reports.
"""

import json
import logging
import traceback
from datetime import datetime, timezone
from pathlib import Path

from windowquant.config import settings

logger = logging.getLogger("windowquant")


def log_error(
    path: str | Path,
    level: str,
    source: str,
    message: str,
    tb: str | None = None,
    extra: dict | None = None,
) -> None:
    """Append one error record to the JSON-lines file at ``path``."""
    entry = {
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "level": level,
        "source": source,
        "message": message[:2000],
        "traceback": tb[:10000] if tb else None,
        "extra": extra,
    }
    try:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    except OSError:
        # Not through ``logger``: this handler may be attached to it.
        logging.getLogger("windowquant.error_tracking.internal").debug(
            "Failed to write error log to %s", path
        )


class ErrorLogHandler(logging.Handler):
    """Logging handler that writes ERROR+ records to an error log file."""

    def __init__(self, path: str | Path):
        super().__init__(level=logging.ERROR)
        self.path = Path(path)

    def emit(self, record):
        if record.levelno < logging.ERROR:
            return
        try:
            tb = None
            if record.exc_info and record.exc_info[2]:
                tb = "".join(traceback.format_exception(*record.exc_info))

            log_error(
                self.path,
                level=record.levelname,
                source=record.name,
                message=record.getMessage(),
                tb=tb,
                extra={"module": record.module, "funcName": record.funcName, "lineno": record.lineno},
            )
        except Exception:
            pass  # never let logging crash a run


def install_error_tracking(path: str | Path | None = None) -> ErrorLogHandler | None:
    """Attach an ``ErrorLogHandler`` to the package logger.

    Uses ``settings.ERROR_LOG_PATH`` when no path is given; returns None (and
    installs nothing) when neither is set. Installing twice for the same path
    is a no-op.
    """
    target = path or settings.ERROR_LOG_PATH
    if not target:
        return None
    target = Path(target)
    for handler in logger.handlers:
        if isinstance(handler, ErrorLogHandler) and handler.path == target:
            return handler
    handler = ErrorLogHandler(target)
    logger.addHandler(handler)
    return handler
