"""Exception hierarchy for tadlet.

Every error raised on purpose by the package derives from `TadError` and also
from the builtin it refines, so callers may catch either.
"""

from __future__ import annotations

from typing import Any, Dict, Optional


class TadError(Exception):
    """Base class for all tadlet errors."""


class ConfigurationError(TadError, ValueError):
    """A configuration value (or a shape implied by one) is invalid."""


class InvalidSegmentError(TadError, ValueError):
    """A segment violates `end > start` or has non-finite endpoints."""


class ShapeError(TadError, ValueError):
    """Array shapes are inconsistent with each other or with the anchor set."""


class AugmentationError(TadError, ValueError):
    """A transform cannot be applied to the given clip."""


class NonFiniteError(TadError, FloatingPointError):
    """A value that must be finite is not."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message)
        self.diagnostics: Dict[str, Any] = dict(diagnostics or {})


class TrainingDivergedError(NonFiniteError):
    """The training loss became non-finite."""


class FormatError(TadError, ValueError):
    """A file does not follow its on-disk format."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    """The payload is shorter or longer than its header announces."""

    def __init__(self, path: object, expected: int, actual: int) -> None:
        super().__init__(f"{path}: payload is {actual} bytes, expected {expected} bytes")
        self.expected = expected
        self.actual = actual


class AnnotationSchemaError(FormatError):
    """An annotation document violates the schema or its invariants."""


class UnknownClassError(TadError, KeyError):
    """A class id outside the vocabulary was encountered."""

    def __str__(self) -> str:
        # KeyError would repr() the message
        return str(self.args[0]) if self.args else ""


class InfeasiblePackingError(TadError, ValueError):
    """Synthetic instances cannot be packed into a video without overlap."""
