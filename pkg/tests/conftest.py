"""Shared fixtures for the DxAgents test suite."""

from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import pytest

from core.config import RunConfig, config_from_mapping, load_config
from core.constants import SYNTHETIC_WORLD_DIR
from core.embedding_client import ProbeScorer, SyntheticEmbeddingBackend
from core.guidelines import GuidelineSet, load_guidelines
from core.llm_client import (
    Completion,
    Conversation,
    FinishReason,
    LLMBackend,
    SamplingParams,
    ScriptedMockBackend,
    apply_stop_sequences,
)

WORLD_CONFIG = SYNTHETIC_WORLD_DIR / "config.toml"


class SequentialMockLLM(LLMBackend):
    """Returns replies in order across generate() and continue_generation() calls."""

    name = "sequential"

    def __init__(self, replies: Sequence[str], resumable: bool = True) -> None:
        self._replies = iter(replies)
        self.resumable = resumable
        self.prompts: List[str] = []

    def _next(self, rendered: str, params: SamplingParams) -> Completion:
        self.prompts.append(rendered)
        reply = next(self._replies, "")
        text, index = apply_stop_sequences(reply, params.stop_sequences)
        if index is not None:
            return Completion(text, FinishReason.STOP_SEQUENCE, index)
        return Completion(reply, FinishReason.END_OF_MESSAGE)

    def generate(self, conv: Conversation, params: SamplingParams) -> Completion:
        return self._next(conv.render(), params)

    def continue_generation(self, conv: Conversation, partial_assistant: str,
                            params: SamplingParams) -> Completion:
        if not self.resumable:
            return super().continue_generation(conv, partial_assistant, params)
        return self._next(conv.render(partial_assistant), params)


class FakeResponse:
    def __init__(self, status_code: int = 200, payload: Any = None, text: str = "") -> None:
        self.status_code = status_code
        self._payload = payload
        self.text = text

    def json(self) -> Any:
        if isinstance(self._payload, Exception):
            raise self._payload
        return self._payload


class FakeSession:
    """requests-like session answering POSTs from a queue of responses or exceptions."""

    def __init__(self, outcomes: Iterable[Any] = ()) -> None:
        self.outcomes = list(outcomes)
        self.posts: List[Dict[str, Any]] = []
        self.gets: List[str] = []
        self.get_error: Optional[Exception] = None
        self.get_status = 200

    def post(self, url: str, json: Any = None, headers: Any = None, timeout: Any = None) -> FakeResponse:
        self.posts.append({"url": url, "json": json, "headers": headers or {}})
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome

    def get(self, url: str, headers: Any = None, timeout: Any = None) -> FakeResponse:
        self.gets.append(url)
        if self.get_error is not None:
            raise self.get_error
        return FakeResponse(self.get_status, {})


def chat_payload(content: Optional[str], finish_reason: str = "stop", **extra: Any) -> Dict[str, Any]:
    choice = {"message": {"role": "assistant", "content": content}, "finish_reason": finish_reason}
    choice.update(extra)
    return {"choices": [choice]}


@pytest.fixture
def world_dir() -> Path:
    return SYNTHETIC_WORLD_DIR


@pytest.fixture
def world_guidelines() -> GuidelineSet:
    return load_guidelines(SYNTHETIC_WORLD_DIR / "guidelines.json")


@pytest.fixture
def synthetic_backend() -> SyntheticEmbeddingBackend:
    return SyntheticEmbeddingBackend.from_file(SYNTHETIC_WORLD_DIR / "world.json")


@pytest.fixture
def scorer(synthetic_backend) -> ProbeScorer:
    return ProbeScorer(synthetic_backend)


@pytest.fixture
def world_agents() -> ScriptedMockBackend:
    """The faithful scripted agents of the bundled world."""
    return ScriptedMockBackend.from_file(SYNTHETIC_WORLD_DIR / "agents.json")


@pytest.fixture
def agent_config():
    """Factory fixture: RunConfig over the bundled world with dotted-key overrides."""

    def _factory(**overrides: Any) -> RunConfig:
        values: Dict[str, Any] = {
            "guidelines.path": "guidelines.json",
            "dataset.manifest": "manifest.csv",
            "screening.psi": 0.5,
            "run.temperature": 0.0,
            "llm.script": "agents.json",
            "embedding.world": "world.json",
            "refinement.graph_path": "disease_graph.txt",
        }
        values.update({key.replace("__", "."): value for key, value in overrides.items()})
        return config_from_mapping(values, base_dir=SYNTHETIC_WORLD_DIR)

    return _factory


@pytest.fixture
def world_config(tmp_path):
    """Factory fixture: the bundled world config with its trace redirected to tmp_path."""

    def _factory(*overrides: str, trace_name: str = "run.jsonl") -> RunConfig:
        trace = (tmp_path / trace_name).as_posix()
        return load_config(WORLD_CONFIG, [f"run.trace_path='{trace}'", *overrides])

    return _factory


@pytest.fixture
def mock_llm():
    """Factory fixture: ScriptedMockBackend from (match, reply) pairs."""

    def _factory(rules: Sequence[Tuple[str, str]] = (), default: str = "",
                 regex: bool = False) -> ScriptedMockBackend:
        return ScriptedMockBackend.from_rules(
            [{"match": match, "reply": reply, "regex": regex} for match, reply in rules], default)

    return _factory


@pytest.fixture
def sequential_llm():
    """Factory fixture: SequentialMockLLM(replies=[...])."""

    def _factory(replies: Sequence[str], resumable: bool = True) -> SequentialMockLLM:
        return SequentialMockLLM(replies, resumable)

    return _factory


@pytest.fixture
def fake_session():
    """Factory fixture: FakeSession(outcomes=[...])."""

    def _factory(*outcomes: Any) -> FakeSession:
        return FakeSession(outcomes)

    return _factory


@pytest.fixture
def no_sleep():
    delays: List[float] = []
    return delays.append, delays
