"""
Logging configuration for the training-time toolkit
Console logging on stderr, optional rotating file logs, and per-run identifiers
stamped on every record so interleaved sweeps can be told apart
"""

import logging
import logging.handlers
import sys
import threading
import uuid
from pathlib import Path
from typing import Optional

from .config import settings

NO_RUN = "N/A"

# Visible from every thread, including the SDE replicate workers
_run_state = {"run_id": NO_RUN}
_run_lock = threading.Lock()


class CustomFormatter(logging.Formatter):
    """Custom formatter with colors for console output"""

    COLORS = {
        "DEBUG": "\033[36m",    # Cyan
        "INFO": "\033[32m",     # Green
        "WARNING": "\033[33m",  # Yellow
        "ERROR": "\033[31m",    # Red
        "CRITICAL": "\033[35m", # Magenta
    }
    RESET = "\033[0m"

    def format(self, record):
        # Colour a copy so the file handler never sees escape codes
        record = logging.makeLogRecord(record.__dict__)
        log_color = self.COLORS.get(record.levelname, self.RESET)
        record.levelname = f"{log_color}{record.levelname}{self.RESET}"
        return super().format(record)


class PerformanceFilter(logging.Filter):
    """Stamps the active run id and a timing field on records that lack them"""

    def filter(self, record):
        if not hasattr(record, "run_id"):
            record.run_id = current_run_id()
        if not hasattr(record, "execution_time"):
            record.execution_time = NO_RUN
        return True


def start_run(command: str) -> str:
    """Open a run scope; records logged until end_run carry the returned id"""
    run_id = f"{command}-{uuid.uuid4().hex[:12]}"
    with _run_lock:
        _run_state["run_id"] = run_id
    return run_id


def end_run() -> None:
    with _run_lock:
        _run_state["run_id"] = NO_RUN


def current_run_id() -> str:
    return _run_state["run_id"]


def setup_logging(level: Optional[str] = None) -> None:
    """Configure toolkit logging with console output and optional file rotation"""

    level_name = (level or settings.log_level).upper()

    root_logger = logging.getLogger("ttime")
    root_logger.setLevel(getattr(logging, level_name))
    root_logger.handlers.clear()

    # stdout carries CLI tables, so the console handler writes to stderr
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(getattr(logging, level_name))
    console_handler.setFormatter(CustomFormatter(
        fmt="%(asctime)s | %(name)-24s | %(levelname)-8s | %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S"
    ))
    console_handler.addFilter(PerformanceFilter())

    if settings.enable_file_logging:
        log_file_path = Path(settings.log_file_path)
        log_file_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.handlers.RotatingFileHandler(
            filename=log_file_path,
            maxBytes=10_000_000,  # 10MB
            backupCount=5,
            encoding="utf-8"
        )
        file_handler.setLevel(getattr(logging, level_name))
        file_handler.setFormatter(logging.Formatter(fmt=settings.log_format, datefmt="%Y-%m-%d %H:%M:%S"))
        file_handler.addFilter(PerformanceFilter())
        root_logger.addHandler(file_handler)

    root_logger.addHandler(console_handler)

    root_logger.debug("Logging system initialized")


def get_application_logger(name: str) -> logging.Logger:
    """Get a logger instance for the toolkit"""
    return logging.getLogger(f"ttime.{name}")


class LoggerMixin:
    """Mixin to add logging capabilities to any class"""

    @property
    def logger(self) -> logging.Logger:
        if not hasattr(self, "_logger"):
            self._logger = get_application_logger(self.__class__.__name__.lower())
        return self._logger

    def log_performance(self, operation: str, execution_time: float, **kwargs):
        """Log a stage timing, tagged with the active run unless run_id is given"""
        extra = {
            "run_id": kwargs.get("run_id", current_run_id()),
            "execution_time": f"{execution_time:.3f}s"
        }
        self.logger.info(
            f"Performance: {operation} completed in {execution_time:.3f}s",
            extra=extra
        )
