"""
LLM backends for DxAgents.

This module provides a uniform text-generation interface over a remote
chat-completions HTTP service and a deterministic scripted mock. Both honour
stop sequences, which the screening agent uses for tool-call turn-taking.
"""

import abc
import json
import logging
import os
import re
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, Deque, Dict, List, Optional, Sequence, Tuple, Union

import requests

from .constants import (
    BACKOFF_BASE_SECONDS,
    CONTINUE_PROMPT,
    DEFAULT_MAX_RETRIES,
    DEFAULT_TIMEOUT,
    DEFAULT_TOKEN_ENV,
    MAX_STOP_SEQUENCES,
    MOCK_HISTORY_LIMIT,
)
from .errors import (
    BackendError,
    BackendTimeout,
    ConfigError,
    PreconditionError,
    ProtocolError,
    UnsupportedByBackend,
)
from .utils import call_with_retries

if TYPE_CHECKING:
    from .config import RunConfig

logger = logging.getLogger(__name__)


class Role(str, Enum):
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class Turn:
    role: Role
    content: str


@dataclass(frozen=True)
class Conversation:
    """
    An immutable chat transcript.

    Roles alternate starting with the user after the optional system entry.
    The with_* methods return extended copies.
    """

    system: Optional[str] = None
    turns: Tuple[Turn, ...] = ()

    def __post_init__(self) -> None:
        for index, turn in enumerate(self.turns):
            expected = Role.USER if index % 2 == 0 else Role.ASSISTANT
            if turn.role != expected:
                raise PreconditionError(
                    f"turn {index} has role {turn.role.value}, expected {expected.value}"
                )

    @classmethod
    def from_user(cls, content: str, system: Optional[str] = None) -> "Conversation":
        return cls(system=system, turns=(Turn(Role.USER, content),))

    def with_user(self, content: str) -> "Conversation":
        return Conversation(self.system, self.turns + (Turn(Role.USER, content),))

    def with_assistant(self, content: str) -> "Conversation":
        return Conversation(self.system, self.turns + (Turn(Role.ASSISTANT, content),))

    @property
    def awaiting_assistant(self) -> bool:
        return bool(self.turns) and self.turns[-1].role == Role.USER

    def to_messages(self) -> List[Dict[str, str]]:
        messages = []
        if self.system:
            messages.append({"role": "system", "content": self.system})
        messages.extend({"role": t.role.value, "content": t.content} for t in self.turns)
        return messages

    def render(self, partial: Optional[str] = None) -> str:
        """
        Render as plain text: one "<role>: <content>" block per turn, blank-line
        separated, with an optional trailing partial assistant turn.
        """
        blocks = [f"{m['role']}: {m['content']}" for m in self.to_messages()]
        if partial is not None:
            blocks.append(f"assistant: {partial}")
        return "\n\n".join(blocks)


@dataclass(frozen=True)
class SamplingParams:
    temperature: float
    max_tokens: int
    stop_sequences: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 2.0:
            raise PreconditionError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_tokens <= 0:
            raise PreconditionError("max_tokens must be positive")
        if len(self.stop_sequences) > MAX_STOP_SEQUENCES:
            raise PreconditionError(f"at most {MAX_STOP_SEQUENCES} stop sequences")
        if any(not s for s in self.stop_sequences):
            raise PreconditionError("stop sequences must be non-empty")


class FinishReason(str, Enum):
    STOP_SEQUENCE = "stop_sequence"
    MAX_TOKENS = "max_tokens"
    END_OF_MESSAGE = "end_of_message"


@dataclass(frozen=True)
class Completion:
    text: str
    finish_reason: FinishReason
    stop_index: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "text": self.text,
            "finish_reason": self.finish_reason.value,
            "stop_index": self.stop_index,
        }


def apply_stop_sequences(text: str, stop_sequences: Sequence[str]) -> Tuple[str, Optional[int]]:
    """
    Truncate text at the earliest stop sequence.

    Args:
        text: Generated text.
        stop_sequences: Candidate stop strings.

    Returns:
        (text before the earliest match, index of the matched stop sequence),
        or (text, None) when none occurs. Ties go to the lower index.
    """
    best_pos: Optional[int] = None
    best_index: Optional[int] = None
    for index, stop in enumerate(stop_sequences):
        pos = text.find(stop)
        if pos != -1 and (best_pos is None or pos < best_pos):
            best_pos, best_index = pos, index
    if best_pos is None:
        return text, None
    return text[:best_pos], best_index


def _completion_from_text(text: str, params: SamplingParams) -> Completion:
    truncated, index = apply_stop_sequences(text, params.stop_sequences)
    if index is not None:
        return Completion(truncated, FinishReason.STOP_SEQUENCE, index)
    return Completion(text, FinishReason.END_OF_MESSAGE)


class LLMBackend(abc.ABC):
    """Interface every text-generation backend implements."""

    name = "abstract"

    @abc.abstractmethod
    def generate(self, conv: Conversation, params: SamplingParams) -> Completion:
        """Generate the next assistant message for conv."""

    def continue_generation(self, conv: Conversation, partial_assistant: str,
                            params: SamplingParams) -> Completion:
        """Resume generation with partial_assistant as the assistant's message so far."""
        raise UnsupportedByBackend(f"{self.name} backend cannot resume an assistant message")

    def ping(self) -> None:
        """Raise BackendError if the backend is unreachable."""

    def describe(self) -> Dict[str, Any]:
        return {"backend": self.name}


def _require_prompt(conv: Conversation) -> None:
    if not conv.awaiting_assistant:
        raise PreconditionError("conversation must end with a user turn")


def resume(backend: LLMBackend, conv: Conversation, partial_assistant: str,
           params: SamplingParams) -> Completion:
    """
    Continue an assistant message, falling back to re-prompting.

    When the backend cannot resume an assistant prefix, the partial text is
    sent as the latest assistant turn followed by a user turn "Continue.".
    """
    try:
        return backend.continue_generation(conv, partial_assistant, params)
    except UnsupportedByBackend:
        logger.debug(f"{backend.name}: assistant prefill unsupported, re-prompting with partial text")
        return backend.generate(conv.with_assistant(partial_assistant).with_user(CONTINUE_PROMPT), params)


# ---------------------------------------------------------------------------
# Scripted mock
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MockRule:
    """
    One scripted reply.

    match is a substring, or a regular expression when regex is true. Regex
    replies may reference capture groups (\\1, \\g<name>).
    """

    match: str
    reply: str
    regex: bool = False
    _pattern: Optional["re.Pattern[str]"] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.regex:
            object.__setattr__(self, "_pattern", re.compile(self.match))

    def apply(self, text: str) -> Optional[str]:
        if self._pattern is not None:
            found = self._pattern.search(text)
            return found.expand(self.reply) if found else None
        return self.reply if self.match in text else None


class ScriptedMockBackend(LLMBackend):
    """
    Deterministic LLM that answers from an ordered rule list.

    The reply is a pure function of the rules and the rendered conversation
    (plus any resumed partial text): first matching rule wins, otherwise the
    default reply. Stop sequences are applied to the reply exactly as a
    service would.
    """

    name = "mock"

    def __init__(self, rules: Sequence[MockRule], default_reply: str = "",
                 history_limit: int = MOCK_HISTORY_LIMIT):
        self.rules: Tuple[MockRule, ...] = tuple(rules)
        self.default_reply = default_reply
        # Most recent calls only; call_count keeps the full total.
        self.call_history: Deque[Dict[str, Any]] = deque(maxlen=history_limit)
        self._calls = 0
        self._lock = threading.Lock()

    @classmethod
    def from_rules(cls, rules: Sequence[Dict[str, Any]], default_reply: str = "") -> "ScriptedMockBackend":
        return cls([MockRule(match=r["match"], reply=r["reply"], regex=bool(r.get("regex", False)))
                    for r in rules], default_reply)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ScriptedMockBackend":
        """
        Load a mock script.

        The file is either a JSON list of {"match", "regex", "reply"} rules or
        an object {"default": str, "rules": [...]}.
        """
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise ConfigError("llm.script", f"{path} is not valid UTF-8 JSON: {e}")
        if isinstance(data, list):
            return cls.from_rules(data)
        if isinstance(data, dict) and isinstance(data.get("rules"), list):
            return cls.from_rules(data["rules"], str(data.get("default", "")))
        raise ConfigError("llm.script", f"{path} is not a mock script")

    @property
    def call_count(self) -> int:
        return self._calls

    def _reply_for(self, rendered: str) -> str:
        for rule in self.rules:
            reply = rule.apply(rendered)
            if reply is not None:
                return reply
        return self.default_reply

    def _respond(self, rendered: str, params: SamplingParams) -> Completion:
        reply = self._reply_for(rendered)
        with self._lock:
            self.call_history.append({"prompt": rendered, "reply": reply})
            self._calls += 1
        return _completion_from_text(reply, params)

    def generate(self, conv: Conversation, params: SamplingParams) -> Completion:
        _require_prompt(conv)
        return self._respond(conv.render(), params)

    def continue_generation(self, conv: Conversation, partial_assistant: str,
                            params: SamplingParams) -> Completion:
        if not partial_assistant:
            raise PreconditionError("partial_assistant must be non-empty")
        _require_prompt(conv)
        return self._respond(conv.render(partial_assistant), params)

    def describe(self) -> Dict[str, Any]:
        return {"backend": self.name, "rules": len(self.rules)}


# ---------------------------------------------------------------------------
# Remote chat-completions service
# ---------------------------------------------------------------------------

class ChatCompletionsClient(LLMBackend):
    """Client for a chat-completions-compatible HTTP service."""

    name = "remote"

    def __init__(self,
                 base_url: str,
                 model: str,
                 token_env: str = DEFAULT_TOKEN_ENV,
                 timeout: float = DEFAULT_TIMEOUT,
                 max_attempts: int = DEFAULT_MAX_RETRIES,
                 backoff_base: float = BACKOFF_BASE_SECONDS,
                 assistant_prefill: bool = False,
                 session: Optional[Any] = None,
                 sleep: Callable[[float], None] = time.sleep):
        """
        Initialize the client.

        Args:
            base_url: Service root; requests go to {base_url}/v1/chat/completions.
            model: Model name sent with every request.
            token_env: Environment variable holding the bearer token.
            timeout: Per-request timeout in seconds.
            max_attempts: Attempts for transport failures.
            backoff_base: First retry delay in seconds, doubled per attempt.
            assistant_prefill: Whether the service resumes a trailing assistant message.
            session: requests-compatible session (injectable for tests).
            sleep: Sleep function used between retries.
        """
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.token_env = token_env
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.assistant_prefill = assistant_prefill
        self.session = session if session is not None else requests.Session()
        self.sleep = sleep

    @property
    def endpoint(self) -> str:
        return f"{self.base_url}/v1/chat/completions"

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env, "").strip()
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _post(self, messages: List[Dict[str, str]], params: SamplingParams,
              extra: Optional[Dict[str, Any]] = None) -> Completion:
        body: Dict[str, Any] = {
            "model": self.model,
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "stop": list(params.stop_sequences),
        }
        if extra:
            body.update(extra)

        def attempt() -> Completion:
            try:
                response = self.session.post(self.endpoint, json=body, headers=self._headers(),
                                             timeout=self.timeout)
            except requests.Timeout as e:
                raise BackendTimeout(f"timeout after {self.timeout}s: {e}")
            except requests.RequestException as e:
                raise BackendError(f"transport error: {e}")

            status = response.status_code
            if status == 429 or status >= 500:
                raise BackendError(f"HTTP {status} from {self.endpoint}")
            if status >= 400:
                raise ProtocolError(f"HTTP {status} from {self.endpoint}: {response.text[:200]}")
            try:
                payload = response.json()
            except ValueError as e:
                raise ProtocolError(f"response is not JSON: {e}")
            return self._parse_completion(payload, params)

        return call_with_retries(attempt, self.max_attempts, self.backoff_base, self.sleep,
                                 label="chat completion")

    @staticmethod
    def _parse_completion(payload: Any, params: SamplingParams) -> Completion:
        try:
            choice = payload["choices"][0]
            content = choice["message"]["content"]
        except (KeyError, IndexError, TypeError) as e:
            raise ProtocolError(f"malformed chat completion: missing {e}")
        if content is None:
            content = ""
        if not isinstance(content, str):
            raise ProtocolError("message content is not a string")

        # Services that ignore "stop" still yield a conforming Completion.
        text, index = apply_stop_sequences(content, params.stop_sequences)
        if index is not None:
            return Completion(text, FinishReason.STOP_SEQUENCE, index)

        finish = choice.get("finish_reason")
        if finish == "length":
            return Completion(text, FinishReason.MAX_TOKENS)
        matched = choice.get("stop_reason", choice.get("matched_stop"))
        if finish == "stop" and isinstance(matched, str) and matched in params.stop_sequences:
            return Completion(text, FinishReason.STOP_SEQUENCE, params.stop_sequences.index(matched))
        return Completion(text, FinishReason.END_OF_MESSAGE)

    def generate(self, conv: Conversation, params: SamplingParams) -> Completion:
        _require_prompt(conv)
        return self._post(conv.to_messages(), params)

    def continue_generation(self, conv: Conversation, partial_assistant: str,
                            params: SamplingParams) -> Completion:
        if not partial_assistant:
            raise PreconditionError("partial_assistant must be non-empty")
        _require_prompt(conv)
        if not self.assistant_prefill:
            raise UnsupportedByBackend(f"{self.base_url} is not configured for assistant prefill")
        messages = conv.to_messages() + [{"role": "assistant", "content": partial_assistant}]
        return self._post(messages, params,
                          extra={"continue_final_message": True, "add_generation_prompt": False})

    def ping(self) -> None:
        try:
            response = self.session.get(f"{self.base_url}/v1/models", headers=self._headers(),
                                        timeout=self.timeout)
        except requests.RequestException as e:
            raise BackendError(f"LLM endpoint {self.base_url} unreachable: {e}", retryable=False)
        if response.status_code >= 500:
            raise BackendError(f"LLM endpoint {self.base_url} answered HTTP {response.status_code}",
                               retryable=False)

    def describe(self) -> Dict[str, Any]:
        return {"backend": self.name, "base_url": self.base_url, "model": self.model}


def build_llm_backend(cfg: "RunConfig") -> LLMBackend:
    """Instantiate the LLM backend named by the run configuration."""
    if cfg.llm_backend == "mock":
        if not cfg.llm_script:
            raise ConfigError("llm.script", "mock backend requires a script path")
        return ScriptedMockBackend.from_file(cfg.resolve(cfg.llm_script))
    if not cfg.llm_base_url:
        raise ConfigError("llm.base_url", "remote backend requires a base URL")
    return ChatCompletionsClient(
        base_url=cfg.llm_base_url,
        model=cfg.llm_model,
        token_env=cfg.llm_token_env,
        timeout=cfg.llm_timeout,
        max_attempts=cfg.max_retries,
        assistant_prefill=cfg.llm_assistant_prefill,
    )
