"""Exception hierarchy for every rejected operation."""
from typing import Optional


class DamaError(Exception):
    """Base error: a short machine code plus a human-readable message."""

    code = "dama_error"

    def __init__(self, message: str, code: Optional[str] = None):
        super().__init__(message)
        self.message = message
        if code is not None:
            self.code = code

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message}


class ShapeMismatchError(DamaError):
    code = "shape_mismatch"


class NonFiniteError(DamaError):
    code = "non_finite"


class ConfigurationError(DamaError):
    code = "configuration"


class AdapterError(DamaError):
    code = "adapter"


class CheckpointError(DamaError):
    """Corrupt or unreadable checkpoint; ``field`` names what failed."""

    code = "checkpoint"

    def __init__(self, message: str, field: str):
        super().__init__(f"{field}: {message}")
        self.field = field

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message, "field": self.field}


class DataError(DamaError):
    code = "data"


class ProbeError(DamaError):
    code = "probe"


class EvaluationError(DamaError):
    code = "evaluation"
