"""Exception hierarchy shared across the toolkit.

Every domain error derives from :class:`RisError` so the CLI can map any
expected failure to exit code 1 while genuine bugs still surface as
ordinary tracebacks.
"""

from __future__ import annotations


class RisError(Exception):
    """Base class for all expected, domain-level failures."""


class ParseError(RisError):
    """A JSONL record or trace file could not be decoded.

    Carries the 1-based line number of the offending line when known.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingContext(RisError):
    """RAG prompt requested for a record that has no retrieval context."""


class TransportError(RisError):
    """HTTP request failed after all retry attempts."""


class RateLimited(TransportError):
    """Endpoint returned 429 on every attempt."""


class UnparseableVerdict(RisError):
    """Judge response did not contain a recognizable verdict token."""


class EmptyTrace(RisError):
    """Trace has no steps to judge."""


class DegenerateMatrix(RisError):
    """Rating matrix violates the minimum rater/category requirements."""


class ZeroVariance(RisError):
    """Pooled variance is zero; effect size is undefined."""


class ConstantInput(RisError):
    """Correlation input has no variance."""


class MissingBaseline(RisError):
    """Error-delta table requested without usable baseline labels."""


class IndexOutOfRange(RisError):
    """Step index outside the trace's step range."""


class DimensionMismatch(RisError):
    """Vector length does not match the expected dimension."""


class SingleClass(RisError):
    """Dataset contains only one class where two are required."""


class InvalidRatio(RisError):
    """Split ratio leaves one side of the partition empty."""


class NonFiniteLoss(RisError):
    """Training loss became NaN or infinite."""


class CorruptModel(RisError):
    """Model file failed magic/length validation."""


class VersionMismatch(RisError):
    """Model file format version is not supported."""
