import logging
import traceback
from typing import Dict, Optional

from rich.console import Console

from core.errors import (
    BackendError,
    BackendTimeout,
    ConfigError,
    DxAgentsError,
    EmptyTailSet,
    GuidelineParseError,
    GuidelineValidationError,
    ManifestError,
    MissingGroundTruth,
    NotSingleLabel,
    PatientNotFound,
    TraceError,
)

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_PARTIAL = 2

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging(verbose: bool = False) -> None:
    """Install the single stderr handler used by every command."""
    root = logging.getLogger()
    if not any(getattr(h, "_dxagents", False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._dxagents = True  # type: ignore[attr-defined]
        root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.WARNING)


class ErrorHandler:
    """Turns exceptions into one-line user messages and exit codes."""

    def __init__(self, console: Optional[Console] = None) -> None:
        """
        Initialize the error handler.

        Args:
            console: Console receiving user-facing messages (stderr by default).
        """
        self.console = console or Console(stderr=True, highlight=False)
        self.logger = logging.getLogger(__name__)

    def show_error(self, error_code: str, exception: Optional[BaseException] = None,
                   details: Optional[str] = None) -> None:
        """
        Print a user-friendly error message based on error code.

        Args:
            error_code: Error code for message lookup
            exception: The original exception (optional)
            details: Additional details to show (optional)
        """
        messages = self._get_error_messages()
        message = messages.get(error_code, messages["UNKNOWN_ERROR"])

        if exception is not None:
            self.logger.debug(f"{error_code}: {exception}\n{traceback.format_exc()}")
        full_message = f"error [{error_code}]: {message}"
        if details:
            full_message += f": {details}"
        self.console.print(full_message, markup=False, soft_wrap=True)

    def show_warning(self, warning_code: str, details: Optional[str] = None) -> None:
        """Print a warning message."""
        messages = self._get_warning_messages()
        message = messages.get(warning_code, messages["UNKNOWN_WARNING"])
        self.logger.debug(f"{warning_code}: {details or 'No details provided'}")
        full_message = f"warning [{warning_code}]: {message}"
        if details:
            full_message += f": {details}"
        self.console.print(full_message, markup=False, soft_wrap=True)

    def _get_error_messages(self) -> Dict[str, str]:
        return {
            "FILE_NOT_FOUND": "file not found",
            "CONFIG_ERROR": "invalid configuration",
            "GUIDELINE_ERROR": "invalid guideline document",
            "MANIFEST_ERROR": "invalid dataset manifest",
            "BACKEND_UNREACHABLE": "backend unreachable",
            "TIMEOUT_ERROR": "backend timed out",
            "TRACE_ERROR": "unreadable trace",
            "PATIENT_NOT_FOUND": "patient not found in trace",
            "EVALUATION_ERROR": "cannot evaluate results",
            "PROCESSING_ERROR": "run failed",
            "UNKNOWN_ERROR": "unexpected error",
        }

    def _get_warning_messages(self) -> Dict[str, str]:
        return {
            "TRUNCATED_TRACE": "trace ends with a truncated record",
            "PARTIAL_FAILURE": "some patients failed",
            "NO_GROUND_TRUTH": "no ground truth, metrics skipped",
            "UNKNOWN_WARNING": "warning",
        }

    def handle_exception(self, exception: BaseException, context: str = "") -> int:
        """
        Report an exception and return the matching exit code.

        Args:
            exception: The exception to handle
            context: Additional context about where the error occurred
        """
        error_code = "UNKNOWN_ERROR"

        if isinstance(exception, FileNotFoundError):
            error_code = "FILE_NOT_FOUND"
        elif isinstance(exception, ConfigError):
            error_code = "CONFIG_ERROR"
        elif isinstance(exception, (GuidelineParseError, GuidelineValidationError)):
            error_code = "GUIDELINE_ERROR"
        elif isinstance(exception, ManifestError):
            error_code = "MANIFEST_ERROR"
        elif isinstance(exception, BackendTimeout):
            error_code = "TIMEOUT_ERROR"
        elif isinstance(exception, BackendError):
            error_code = "BACKEND_UNREACHABLE"
        elif isinstance(exception, TraceError):
            error_code = "TRACE_ERROR"
        elif isinstance(exception, PatientNotFound):
            error_code = "PATIENT_NOT_FOUND"
        elif isinstance(exception, (MissingGroundTruth, NotSingleLabel, EmptyTailSet)):
            error_code = "EVALUATION_ERROR"
        elif isinstance(exception, DxAgentsError):
            error_code = "PROCESSING_ERROR"

        details = f"{context}: {exception}" if context else str(exception)
        self.show_error(error_code, exception, details)
        return EXIT_FATAL
