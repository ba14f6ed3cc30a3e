import logging
import sys
import uuid
from contextvars import ContextVar
from typing import Optional

from dama.core.config import settings


# Context variable for the current run id
run_id: ContextVar[Optional[str]] = ContextVar("run_id", default=None)


class RunIdFilter(logging.Filter):
    """Add run ID to log records."""

    def filter(self, record):
        record.run_id = run_id.get() or "no-run-id"
        return True


def setup_logging(level: Optional[str] = None):
    """Configure application logging."""
    if level is None:
        level = "DEBUG" if settings.DEBUG else settings.LOG_LEVEL
    log_level = getattr(logging, level.upper(), logging.INFO)

    formatter = logging.Formatter(
        "%(asctime)s - %(name)s - %(levelname)s - [%(run_id)s] - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(formatter)
    console_handler.addFilter(RunIdFilter())

    root_logger = logging.getLogger()
    root_logger.setLevel(log_level)
    # Repeated CLI invocations in one process must not stack handlers
    for handler in list(root_logger.handlers):
        if getattr(handler, "_dama_handler", False):
            root_logger.removeHandler(handler)
    console_handler._dama_handler = True
    root_logger.addHandler(console_handler)

    logging.getLogger("dama.numcore").setLevel(max(log_level, logging.INFO))


def get_run_id() -> str:
    """Get or create run ID."""
    current = run_id.get()
    if not current:
        current = str(uuid.uuid4())
        run_id.set(current)
    return current


def set_run_id(value: str):
    """Set run ID."""
    run_id.set(value)
