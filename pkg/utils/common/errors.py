"""
Exception hierarchy shared by the library and the command-line entry point.
"""

from typing import Any, Dict, Optional, Sequence


class TransformableNASError(Exception):
    """Base class for every error raised by this project."""

    exit_code: int = 1


class ConfigError(TransformableNASError):
    """Invalid experiment configuration, flag value or mismatched artifact set."""

    exit_code = 2

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(message)


class DataFormatError(TransformableNASError):
    """Malformed or inconsistent data file."""

    exit_code = 3


class MissingArtifactError(DataFormatError):
    """An input artifact required by a command does not exist."""

    def __init__(self, path: Any, produced_by: Optional[str] = None):
        self.path = str(path)
        self.produced_by = produced_by
        hint = f" (run '{produced_by}' first)" if produced_by else ""
        super().__init__(f"Required artifact not found: {self.path}{hint}")


class InsufficientDataError(DataFormatError):
    """Too few samples to fit a model."""

    def __init__(self, available: int, required: int, what: str = "latency pairs"):
        self.available = available
        self.required = required
        super().__init__(f"Need at least {required} {what}, got {available}")


class NumericalError(TransformableNASError):
    """Non-finite value produced during optimisation."""

    exit_code = 4

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        self.context = context or {}
        super().__init__(message)


class DegenerateBatchError(NumericalError):
    """Batch statistics requested on a batch that cannot provide them."""


class ShapeMismatchError(TransformableNASError, ValueError):
    """Array shapes are incompatible for an operation."""

    def __init__(self, op: str, axes: Sequence[str], expected: Any, actual: Any):
        self.op = op
        self.axes = tuple(axes)
        super().__init__(
            f"{op}: dimension mismatch on {', '.join(self.axes)} "
            f"(expected {expected}, got {actual})"
        )


class ArchitectureError(ConfigError):
    """Malformed architecture encoding or operator index."""


class UnsupportedMergeError(TransformableNASError):
    """Convolution pair cannot be merged by the generic kernel merge."""


class TransformError(TransformableNASError):
    """Structural transformation refused or internally inconsistent."""


def exit_code_for(exc: BaseException) -> int:
    """Return the process exit code for an exception raised by a command."""
    if isinstance(exc, TransformableNASError):
        return exc.exit_code
    return 1
