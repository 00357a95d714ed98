"""
Exception hierarchy for DxAgents.

Every failure raised by the agents, backends and run plumbing derives from
DxAgentsError so the command-line layer can map it to an exit code.
"""

from enum import Enum
from typing import Any, Optional


class DxAgentsError(Exception):
    """Base class for all DxAgents errors."""


class PreconditionError(DxAgentsError, ValueError):
    """An operation was called with arguments violating its precondition."""


# Guidelines

class GuidelineParseError(DxAgentsError):
    """Malformed guideline document."""

    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class GuidelineValidationError(DxAgentsError):
    """Guideline document parsed but violates a domain invariant."""


class ExtractionEmpty(DxAgentsError):
    """The LLM produced no usable finding after all attempts."""


# Backends

class BackendError(DxAgentsError):
    """Transport-level failure talking to a backend service."""

    def __init__(self, message: str, attempts: int = 1, retryable: bool = True):
        super().__init__(message)
        self.attempts = attempts
        self.retryable = retryable
        self.transcript: Optional[Any] = None


class BackendTimeout(BackendError):
    """The backend did not answer within the configured timeout."""


class ProtocolError(BackendError):
    """The backend answered with a response that does not follow the wire protocol."""

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message, attempts=attempts, retryable=False)


class UnsupportedByBackend(BackendError):
    """The backend cannot perform the requested operation (e.g. assistant-prefix resumption)."""

    def __init__(self, message: str):
        super().__init__(message, attempts=0, retryable=False)


class DimensionMismatch(DxAgentsError):
    """Embedding dimensions disagree."""


class ZeroVector(DxAgentsError):
    """Cosine similarity is undefined for a zero-norm vector."""


class ImageNotFound(DxAgentsError):
    """The embedding backend cannot resolve an image reference."""


# Agents

class MalformedKind(str, Enum):
    NO_CLIP_KEYWORD = "NoClipKeyword"
    NO_SLASH_SEPARATOR = "NoSlashSeparator"
    EMPTY_DESCRIPTION = "EmptyDescription"
    IDENTICAL_DESCRIPTIONS = "IdenticalDescriptions"


class MalformedToolCall(DxAgentsError):
    """Assistant text stopped at the arrow but is not a valid CLIP call."""

    def __init__(self, kind: MalformedKind, segment: str):
        super().__init__(f"{kind.value}: {segment!r}")
        self.kind = kind
        self.segment = segment


class ScreeningFailed(DxAgentsError):
    """Screening aborted after too many consecutive malformed tool calls."""

    def __init__(self, message: str, transcript: Any):
        super().__init__(message)
        self.transcript = transcript


class AnswerNotFound(DxAgentsError):
    """No answer sentinel in the agent's reply."""

    def __init__(self, text: str):
        super().__init__("answer sentence not found")
        self.text = text


class PatientFailed(DxAgentsError):
    """Every stage of a patient failed on backend errors."""


# Run plumbing

class ConfigError(DxAgentsError):
    """Invalid or incomplete run configuration."""

    def __init__(self, key: str, reason: str):
        super().__init__(f"{key}: {reason}")
        self.key = key
        self.reason = reason


class ManifestError(DxAgentsError):
    """Invalid dataset manifest."""


class TraceError(DxAgentsError):
    """Unreadable trace file."""


class PatientNotFound(DxAgentsError):
    """Requested patient id is absent from the trace."""


# Evaluation

class MissingGroundTruth(DxAgentsError):
    """A patient has no ground truth for any evaluated label."""


class NotSingleLabel(DxAgentsError):
    """Tail accuracy requested on results without a single-label choice."""


class EmptyTailSet(DxAgentsError):
    """No patient belongs to a tail class."""
