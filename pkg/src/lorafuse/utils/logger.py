"""Logging for LoraFuse.

Library code never prints. Per-step numbers go out as DEBUG records of the form
``<event> key=value ...`` so a log file can be grepped or split into columns;
command milestones go out at INFO.
"""

import logging
import sys
import threading
from datetime import datetime
from pathlib import Path
from typing import Optional

from ..core.config import get_config

CONSOLE_FORMAT = "[%(levelname)s] %(message)s"
FILE_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def format_fields(**fields: object) -> str:
    """Render ``key=value`` pairs in argument order; floats keep 6 significant digits."""
    parts = []
    for key, value in fields.items():
        if isinstance(value, float):
            value = f"{value:.6g}"
        parts.append(f"{key}={value}")
    return " ".join(parts)


class LoraFuseLogger:
    """Wrapper around a standard logger configured from application settings."""

    def __init__(self, name: str = "lorafuse", log_to_file: Optional[bool] = None) -> None:
        """Initialize logger.

        Handlers are attached once per logger name.

        Args:
            name: Logger name.
            log_to_file: Whether to write the daily log file; defaults to the
                ``log_to_file`` setting.
        """
        self.config = get_config()
        self.logger = logging.getLogger(name)
        self.logger.setLevel(getattr(logging, self.config.log_level, logging.INFO))

        if self.logger.handlers:
            return

        # errors only on the terminal; rich output owns stdout
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(logging.ERROR)
        console_handler.setFormatter(logging.Formatter(CONSOLE_FORMAT))
        self.logger.addHandler(console_handler)

        if self.config.log_to_file if log_to_file is None else log_to_file:
            file_handler = logging.FileHandler(self.log_file, encoding="utf-8")
            file_handler.setLevel(logging.DEBUG)
            file_handler.setFormatter(logging.Formatter(FILE_FORMAT))
            self.logger.addHandler(file_handler)

    @property
    def log_file(self) -> Path:
        """Today's log file in the configured log directory."""
        return self.config.log_dir / f"lorafuse_{datetime.now().strftime('%Y%m%d')}.log"

    def metric(self, event: str, **fields: object) -> None:
        """Log one per-step record at DEBUG, e.g. ``base_train step=10 loss=0.41``."""
        if self.logger.isEnabledFor(logging.DEBUG):
            self.logger.debug(f"{event} {format_fields(**fields)}")

    def milestone(self, command: str, **fields: object) -> None:
        """Log the outcome of a command at INFO."""
        self.logger.info(f"{command} {format_fields(**fields)}")

    def debug(self, message: str) -> None:
        self.logger.debug(message)


_logger: Optional[LoraFuseLogger] = None
_logger_lock = threading.Lock()


def get_logger() -> LoraFuseLogger:
    """Get or create global logger instance with thread-safe initialization.

    Returns:
        Global LoraFuseLogger instance.
    """
    global _logger
    if _logger is None:
        with _logger_lock:
            if _logger is None:
                _logger = LoraFuseLogger()
    return _logger
