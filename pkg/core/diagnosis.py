"""
Diagnosis agent for DxAgents.

The diagnosis agent receives the screening observations for one disease,
reasons over them and ends with the answer sentence
"Therefore, my answer is: yes." or "... no.", which is parsed into a binary
prediction plus the reasoning that preceded it.
"""

import logging
import re
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Dict, Optional, Sequence, Tuple

from .constants import (
    ANSWER_REMINDER,
    CONDITION_PLACEHOLDER,
    DIAGNOSIS_TEMPLATE,
    OBSERVATIONS_PLACEHOLDER,
)
from .embedding_client import FindingObservation
from .errors import AnswerNotFound, PreconditionError
from .file_handler import FileHandler
from .llm_client import Conversation, LLMBackend, SamplingParams
from .tracing import NULL_TRACE, BoundTrace

if TYPE_CHECKING:
    from .config import RunConfig

logger = logging.getLogger(__name__)

AGENT = "diagnosis"

_ANSWER = re.compile(r"therefore,\s*my answer is:\s*(yes|no)\b\.?", re.IGNORECASE)


@dataclass(frozen=True)
class DiagnosisResult:
    disease: str
    prediction: bool
    reasoning: str
    parse_attempts: int = 1
    fallback: bool = False
    raw_text: str = ""

    def __post_init__(self) -> None:
        if self.parse_attempts < 1:
            raise PreconditionError("parse_attempts must be at least 1")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "disease": self.disease,
            "prediction": self.prediction,
            "reasoning": self.reasoning,
            "parse_attempts": self.parse_attempts,
            "fallback": self.fallback,
            "raw_text": self.raw_text,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DiagnosisResult":
        return cls(
            disease=data["disease"],
            prediction=bool(data["prediction"]),
            reasoning=data.get("reasoning", ""),
            parse_attempts=int(data.get("parse_attempts", 1)),
            fallback=bool(data.get("fallback", False)),
            raw_text=data.get("raw_text", ""),
        )


def render_observations(observations: Sequence[FindingObservation]) -> str:
    return "\n".join(f"{o.description}: {o.verdict.value}" for o in observations)


def build_diagnosis_prompt(observations: Sequence[FindingObservation], disease: str,
                           template: Optional[str] = None) -> Conversation:
    if not disease or not disease.strip():
        raise PreconditionError("disease must be non-empty")
    if template is None:
        template = FileHandler().read_template(DIAGNOSIS_TEMPLATE)
    prompt = (template
              .replace(OBSERVATIONS_PLACEHOLDER, render_observations(observations))
              .replace(CONDITION_PLACEHOLDER, disease))
    return Conversation.from_user(prompt)


def parse_answer(text: str) -> Tuple[bool, str]:
    """
    Parse the final answer sentence of an agent reply.

    The last occurrence wins; matching ignores case and the closing period.

    Args:
        text: Assistant reply.

    Returns:
        (prediction, reasoning before the sentence, stripped).

    Raises:
        AnswerNotFound: If the reply contains no answer sentence.
    """
    matches = list(_ANSWER.finditer(text))
    if not matches:
        raise AnswerNotFound(text)
    last = matches[-1]
    return last.group(1).lower() == "yes", text[:last.start()].strip()


@dataclass(frozen=True)
class AnswerExchange:
    """Outcome of asking one question until a parseable answer arrives."""

    conversation: Conversation
    prediction: Optional[bool]
    reasoning: str
    raw_text: str
    attempts: int

    @property
    def parsed(self) -> bool:
        return self.prediction is not None


def ask_for_answer(llm: LLMBackend, conv: Conversation, params: SamplingParams,
                   max_attempts: int, trace: BoundTrace = NULL_TRACE,
                   agent: str = AGENT) -> AnswerExchange:
    """
    Generate a reply and parse its answer sentence, reminding the agent of
    the exact sentence after each unparseable reply.

    The returned conversation ends with the last assistant reply.
    """
    raw = ""
    for attempt in range(1, max(1, max_attempts) + 1):
        trace.emit("prompt", agent=agent, messages=conv.to_messages())
        completion = llm.generate(conv, params)
        trace.emit("completion", agent=agent, **completion.to_dict())
        raw = completion.text
        conv = conv.with_assistant(raw)
        try:
            prediction, reasoning = parse_answer(raw)
        except AnswerNotFound:
            trace.emit("parse_event", agent=agent, ok=False, error="AnswerNotFound", segment=raw)
            logger.debug(f"{agent}: no answer sentence in attempt {attempt}/{max_attempts}")
            if attempt < max_attempts:
                conv = conv.with_user(ANSWER_REMINDER)
            continue
        trace.emit("parse_event", agent=agent, ok=True, prediction=prediction)
        return AnswerExchange(conv, prediction, reasoning, raw, attempt)
    return AnswerExchange(conv, None, "", raw, max(1, max_attempts))


class DiagnosisAgent:
    """Turns one disease's observations into a binary prediction with reasoning."""

    def __init__(self, llm: LLMBackend, cfg: "RunConfig", template: Optional[str] = None):
        self.llm = llm
        self.cfg = cfg
        self.template = template if template is not None else cfg.files.read_template(
            DIAGNOSIS_TEMPLATE, cfg.diagnosis_template or None)

    def run(self, observations: Sequence[FindingObservation], disease: str,
            trace: BoundTrace = NULL_TRACE) -> DiagnosisResult:
        conv = build_diagnosis_prompt(observations, disease, self.template)
        params = SamplingParams(temperature=self.cfg.temperature, max_tokens=self.cfg.diagnosis_max_tokens)
        exchange = ask_for_answer(self.llm, conv, params, self.cfg.max_retries, trace)

        if exchange.parsed:
            result = DiagnosisResult(disease, bool(exchange.prediction), exchange.reasoning,
                                     exchange.attempts, raw_text=exchange.raw_text)
        else:
            logger.warning(f"Diagnosis of {disease} unparseable after {exchange.attempts} attempts, "
                           f"falling back to negative")
            result = DiagnosisResult(disease, False, exchange.raw_text, exchange.attempts,
                                     fallback=True, raw_text=exchange.raw_text)
        trace.emit("stage_result", agent=AGENT, stage="diagnosis", **result.to_dict())
        return result


def run_diagnosis(observations: Sequence[FindingObservation], disease: str, cfg: "RunConfig",
                  llm: LLMBackend, trace: BoundTrace = NULL_TRACE) -> DiagnosisResult:
    return DiagnosisAgent(llm, cfg).run(observations, disease, trace)
