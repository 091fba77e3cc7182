"""Exception types shared across the package."""

from __future__ import annotations


class RoseError(Exception):
    """Base class for all package-specific failures."""


class ConfigurationError(RoseError):
    """Invalid config file, ruleset, fixture, or port wiring."""


class MalformedAnnotationError(RoseError):
    """A mask annotation (RLE string or shape) is inconsistent."""


class DatasetValidationError(MalformedAnnotationError):
    """A dataset record failed validation; carries the offending line."""

    def __init__(self, message: str, line_no: int | None = None) -> None:
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class CacheIntegrityError(RoseError):
    """A cache entry does not match the request that addressed it."""


class RetrievalUnavailableError(RoseError):
    """Retrieval produced nothing usable (e.g. every chunk failed to embed)."""


class SegmenterError(RoseError):
    """The wrapped segmenter failed: the one fatal pipeline error."""
