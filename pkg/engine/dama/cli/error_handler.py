import json
import logging
import sys
from typing import Callable

from pydantic import ValidationError

from dama.core.exceptions import DamaError
from dama.core.logging_config import get_run_id


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_REJECTED = 1
EXIT_INVALID_CONFIG = 2
EXIT_INTERNAL = 70


def _emit(code, message: str, **extra) -> None:
    envelope = {"error": {"code": code, "message": message, "run_id": get_run_id(), **extra}}
    print(json.dumps(envelope, sort_keys=True), file=sys.stderr)


def dama_error_handler(exc: DamaError) -> int:
    """Handle rejected operations."""
    run_id = get_run_id()

    logger.error(f"Rejected: {exc.code} - {exc.message}", extra={"run_id": run_id})

    details = exc.to_dict()
    _emit(details.pop("code"), details.pop("message"), **details)
    return EXIT_REJECTED


def validation_error_handler(exc: ValidationError) -> int:
    """Handle configuration validation errors."""
    run_id = get_run_id()

    logger.warning(f"Validation Error: {exc.errors()}", extra={"run_id": run_id})

    details = [
        {"loc": ".".join(str(part) for part in err["loc"]), "msg": err["msg"]}
        for err in exc.errors()
    ]
    _emit("validation", "Invalid configuration", details=details)
    return EXIT_INVALID_CONFIG


def general_error_handler(exc: Exception) -> int:
    """Handle anything unexpected."""
    run_id = get_run_id()

    logger.exception(f"Unhandled Exception: {str(exc)}", extra={"run_id": run_id})

    _emit("internal", "Internal error")
    return EXIT_INTERNAL


def run_guarded(command: Callable[[], object]) -> int:
    """Run one command, mapping every failure family to its exit status."""
    try:
        command()
    except DamaError as exc:
        return dama_error_handler(exc)
    except ValidationError as exc:
        return validation_error_handler(exc)
    except Exception as exc:
        return general_error_handler(exc)
    return EXIT_OK
