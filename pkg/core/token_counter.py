"""
Token counting functionality for DxAgents.

The screening loop caps each transcript with a token budget. Counting uses
tiktoken when available, with a regex fallback for environments where
tiktoken is not installed or its encoding files cannot be fetched.
"""

import functools
import logging
import re
from typing import Any, Optional

logger = logging.getLogger(__name__)

# Try to import tiktoken for accurate token counting
try:
    import tiktoken
    TIKTOKEN_AVAILABLE = True
except ImportError:
    TIKTOKEN_AVAILABLE = False

ENCODING_NAME = "cl100k_base"


@functools.lru_cache(maxsize=1)
def _get_encoding() -> Optional[Any]:
    if not TIKTOKEN_AVAILABLE:
        return None
    try:
        return tiktoken.get_encoding(ENCODING_NAME)
    except Exception as e:
        logger.warning(f"Tiktoken encoding unavailable, using regex fallback: {e}")
        return None


def count_tokens(text: str) -> int:
    """
    Returns the token count of the given text using the "cl100k_base" encoding
    when tiktoken is available, otherwise falls back to regex-based counting.
    """
    if not text or not text.strip():
        return 0

    encoding = _get_encoding()
    if encoding is not None:
        return len(encoding.encode(text))
    return _fallback_count_tokens(text)


def _fallback_count_tokens(text: str) -> int:
    """Approximate tokenizer: words and individual punctuation marks."""
    return len(re.findall(r'\w+|[^\w\s]', text, re.UNICODE))
