"""
Utility functions for DxAgents.

This module contains general-purpose helpers: content digests, canonical
JSON, timestamps and the retry loop shared by the HTTP backends.
"""

import hashlib
import json
import logging
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Optional, TypeVar

from .constants import BACKOFF_BASE_SECONDS
from .errors import BackendError, BackendTimeout

logger = logging.getLogger(__name__)

T = TypeVar('T')


def canonical_json(obj: Any) -> str:
    """Serialize to JSON with sorted keys and no insignificant whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_digest(path: Optional[Path]) -> str:
    """
    Digest of a file's bytes.

    Args:
        path: File path, or None.

    Returns:
        Hex SHA-256 of the file contents, "" for None or a missing file.
    """
    if path is None or not Path(path).is_file():
        return ""
    return sha256_hex(Path(path).read_bytes())


def utc_timestamp() -> str:
    return datetime.now(timezone.utc).isoformat()


def call_with_retries(
    fn: Callable[[], T],
    attempts: int,
    backoff_base: float = BACKOFF_BASE_SECONDS,
    sleep: Callable[[float], None] = time.sleep,
    label: str = "request",
) -> T:
    """
    Run fn, retrying retryable BackendErrors with exponential backoff.

    Non-retryable errors (protocol errors) are raised on the first failure.
    The final error carries the number of attempts made.

    Args:
        fn: Zero-argument callable performing one attempt.
        attempts: Maximum number of attempts (>= 1).
        backoff_base: Delay before the second attempt, doubled each time.
        sleep: Sleep function, injectable for tests.
        label: Name used in log messages.

    Returns:
        The first successful result of fn.
    """
    last_error: Optional[BackendError] = None
    for attempt in range(1, max(1, attempts) + 1):
        try:
            return fn()
        except BackendError as e:
            e.attempts = attempt
            if not e.retryable:
                raise
            last_error = e
            if attempt < attempts:
                delay = backoff_base * (2 ** (attempt - 1))
                logger.warning(f"{label} attempt {attempt}/{attempts} failed: {e}; retrying in {delay:.2f}s")
                sleep(delay)
    assert last_error is not None
    if isinstance(last_error, BackendTimeout):
        raise BackendTimeout(f"{label} timed out after {attempts} attempts: {last_error}", attempts=attempts)
    raise BackendError(f"{label} failed after {attempts} attempts: {last_error}", attempts=attempts)
