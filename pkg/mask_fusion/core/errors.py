from typing import Any, Dict, Optional


class MaskFusionError(Exception):
    """Base error carrying a process exit code and machine-readable details."""

    exit_code = 1

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": type(self).__name__,
            "message": self.message,
            "exit_code": self.exit_code,
            "details": self.details,
        }


class ConfigError(MaskFusionError):
    exit_code = 2


class DataError(MaskFusionError):
    exit_code = 3


class NumericError(MaskFusionError):
    exit_code = 4


class ShapeError(DataError, ValueError):
    """Tensor or volume extents violate an operation's precondition."""


class VolumeFormatError(DataError):
    pass


class MalformedHeaderError(VolumeFormatError):
    pass


class LengthMismatchError(VolumeFormatError):
    pass


class UnknownDtypeError(VolumeFormatError):
    pass


class CheckpointError(DataError):
    pass
