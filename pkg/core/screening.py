"""
Screening agent for DxAgents.

For one (patient, disease) pair the screening agent turns each guideline
finding into a contrastive CLIP call, "CLIP: <positive> / <negative> ->".
Generation stops at the arrow, the probe is scored against the image, the
verdict is appended and generation resumes until the agent is done.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Tuple

from .constants import (
    CONDITION_PLACEHOLDER,
    FINDINGS_BLOCK_PLACEHOLDER,
    MALFORMED_CALL_NOTICE,
    SCREENING_TEMPLATE,
    TOOL_CALL_ARROW,
    TOOL_CALL_KEYWORD,
    TOOL_CALL_SEPARATOR,
)
from .embedding_client import (
    ClipMode,
    FindingObservation,
    FindingProbe,
    ProbeScorer,
    VlmConfig,
)
from .errors import (
    BackendError,
    MalformedKind,
    MalformedToolCall,
    PreconditionError,
    ScreeningFailed,
)
from .file_handler import FileHandler
from .guidelines import Disease, render_finding_block
from .llm_client import (
    Completion,
    Conversation,
    FinishReason,
    LLMBackend,
    SamplingParams,
    resume,
)
from .token_counter import count_tokens
from .tracing import NULL_TRACE, BoundTrace

if TYPE_CHECKING:
    from .config import RunConfig
    from .pipeline import PatientRecord

logger = logging.getLogger(__name__)

AGENT = "screening"


@dataclass(frozen=True)
class ToolCall:
    positive: str
    negative: str
    source_span: Tuple[int, int] = field(default=(0, 0), compare=False)


class ScreeningStop(str, Enum):
    END_OF_MESSAGE = "end_of_message"
    MAX_TOKENS = "max_tokens"
    MAX_TOOL_CALLS = "max_tool_calls"
    TOKEN_BUDGET = "token_budget"


@dataclass(frozen=True)
class TranscriptTurn:
    kind: str  # "generated" | "tool_result" | "parse_error"
    text: str


@dataclass
class ScreeningTranscript:
    disease: str
    turns: List[TranscriptTurn] = field(default_factory=list)
    observations: List[FindingObservation] = field(default_factory=list)
    parse_failures: List[Dict[str, str]] = field(default_factory=list)
    stop_reason: Optional[ScreeningStop] = None
    failed: bool = False

    @property
    def text(self) -> str:
        """The assistant transcript: generated text interleaved with injected results."""
        return "".join(turn.text for turn in self.turns)

    @property
    def mean_p_positive(self) -> float:
        if not self.observations:
            return 0.0
        return sum(o.p_positive for o in self.observations) / len(self.observations)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "disease": self.disease,
            "turns": [{"kind": t.kind, "text": t.text} for t in self.turns],
            "observations": [o.to_dict() for o in self.observations],
            "parse_failures": list(self.parse_failures),
            "stop_reason": self.stop_reason.value if self.stop_reason else None,
            "failed": self.failed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ScreeningTranscript":
        return cls(
            disease=data["disease"],
            turns=[TranscriptTurn(t["kind"], t["text"]) for t in data.get("turns", [])],
            observations=[FindingObservation.from_dict(o) for o in data.get("observations", [])],
            parse_failures=list(data.get("parse_failures", [])),
            stop_reason=ScreeningStop(data["stop_reason"]) if data.get("stop_reason") else None,
            failed=bool(data.get("failed", False)),
        )


def build_screening_prompt(disease: Disease, template: Optional[str] = None) -> Conversation:
    """Substitute the disease name and its finding block into the screening template."""
    if template is None:
        template = FileHandler().read_template(SCREENING_TEMPLATE)
    prompt = (template
              .replace(FINDINGS_BLOCK_PLACEHOLDER, render_finding_block(disease))
              .replace(CONDITION_PLACEHOLDER, disease.name))
    return Conversation.from_user(prompt)


def parse_tool_call(segment: str, offset: int = 0) -> ToolCall:
    """
    Parse the CLIP call at the end of an assistant segment.

    The segment is the text generated up to (not including) the arrow. The
    last line containing "CLIP:" is split at the first slash into the
    positive and negative descriptions, both trimmed.

    Args:
        segment: Assistant text up to the stop.
        offset: Position of segment within the whole transcript, for source_span.

    Raises:
        MalformedToolCall: NoClipKeyword, NoSlashSeparator, EmptyDescription
            or IdenticalDescriptions.
    """
    keyword_at = segment.rfind(TOOL_CALL_KEYWORD)
    if keyword_at == -1:
        raise MalformedToolCall(MalformedKind.NO_CLIP_KEYWORD, segment)
    line_end = segment.find("\n", keyword_at)
    if line_end == -1:
        line_end = len(segment)
    body = segment[keyword_at + len(TOOL_CALL_KEYWORD):line_end]
    if TOOL_CALL_SEPARATOR not in body:
        raise MalformedToolCall(MalformedKind.NO_SLASH_SEPARATOR, segment)
    positive, negative = (part.strip() for part in body.split(TOOL_CALL_SEPARATOR, 1))
    if not positive or not negative or TOOL_CALL_ARROW in positive or TOOL_CALL_ARROW in negative:
        raise MalformedToolCall(MalformedKind.EMPTY_DESCRIPTION, segment)
    if positive == negative:
        raise MalformedToolCall(MalformedKind.IDENTICAL_DESCRIPTIONS, segment)
    return ToolCall(positive, negative, (offset + keyword_at, offset + line_end))


def naive_negation(finding_description: str) -> str:
    """Rule-based negation: "No " followed by the description with its first letter lowercased."""
    if not finding_description:
        raise PreconditionError("finding description must be non-empty")
    return "No " + finding_description[0].lower() + finding_description[1:]


def _ends_with_unanswered_call(segment: str) -> bool:
    lines = [line for line in segment.splitlines() if line.strip()]
    return bool(lines) and TOOL_CALL_KEYWORD in lines[-1] and TOOL_CALL_SEPARATOR in lines[-1]


class ScreeningAgent:
    """Runs the generate, parse, score, append loop for one disease at a time."""

    def __init__(self, llm: LLMBackend, scorer: ProbeScorer, cfg: "RunConfig",
                 template: Optional[str] = None):
        self.llm = llm
        self.scorer = scorer
        self.cfg = cfg
        self.template = template if template is not None else cfg.files.read_template(
            SCREENING_TEMPLATE, cfg.screening_template or None)
        self.vlm = VlmConfig(psi=cfg.psi, mode=ClipMode(cfg.clip_mode))

    def _params(self) -> SamplingParams:
        return SamplingParams(temperature=self.cfg.temperature,
                              max_tokens=self.cfg.screening_max_tokens,
                              stop_sequences=(TOOL_CALL_ARROW,))

    def _probe(self, call: ToolCall) -> FindingProbe:
        if self.cfg.negation_mode == "naive":
            return FindingProbe(call.positive, naive_negation(call.positive))
        return FindingProbe(call.positive, call.negative)

    def _next(self, conv: Conversation, transcript: ScreeningTranscript,
              trace: BoundTrace) -> Completion:
        params = self._params()
        partial = transcript.text
        if partial:
            completion = resume(self.llm, conv, partial, params)
        else:
            completion = self.llm.generate(conv, params)
        trace.emit("completion", agent=AGENT, **completion.to_dict())
        return completion

    def run(self, patient: "PatientRecord", disease: Disease,
            trace: BoundTrace = NULL_TRACE) -> ScreeningTranscript:
        """
        Screen one patient image for one disease's findings.

        Returns:
            Transcript whose observations follow tool-call order.

        Raises:
            ScreeningFailed: After max_retries consecutive malformed calls.
            BackendError: On backend failures, with the partial transcript attached.
        """
        conv = build_screening_prompt(disease, self.template)
        transcript = ScreeningTranscript(disease=disease.name)
        max_calls = self.cfg.max_tool_calls or 2 * len(disease.findings)
        calls = 0
        consecutive_failures = 0
        trace.emit("prompt", agent=AGENT, messages=conv.to_messages())

        try:
            while True:
                completion = self._next(conv, transcript, trace)
                offset = len(transcript.text)
                segment = completion.text
                if segment:
                    transcript.turns.append(TranscriptTurn("generated", segment))

                is_call = (completion.finish_reason == FinishReason.STOP_SEQUENCE
                           or (completion.finish_reason == FinishReason.END_OF_MESSAGE
                               and _ends_with_unanswered_call(segment)))
                if not is_call:
                    transcript.stop_reason = (ScreeningStop.MAX_TOKENS
                                              if completion.finish_reason == FinishReason.MAX_TOKENS
                                              else ScreeningStop.END_OF_MESSAGE)
                    break

                calls += 1
                prefix = "" if not segment or segment[-1].isspace() else " "
                try:
                    call = parse_tool_call(segment, offset)
                except MalformedToolCall as e:
                    consecutive_failures += 1
                    transcript.parse_failures.append({"kind": e.kind.value, "segment": e.segment})
                    trace.emit("parse_event", agent=AGENT, ok=False, error=e.kind.value, segment=e.segment)
                    logger.warning(f"Malformed tool call for {disease.name} ({e.kind.value}), "
                                   f"{consecutive_failures}/{self.cfg.max_retries}")
                    if consecutive_failures >= self.cfg.max_retries:
                        transcript.failed = True
                        raise ScreeningFailed(
                            f"{consecutive_failures} consecutive malformed tool calls for {disease.name}",
                            transcript)
                    transcript.turns.append(TranscriptTurn("parse_error", prefix + MALFORMED_CALL_NOTICE))
                else:
                    consecutive_failures = 0
                    probe = self._probe(call)
                    trace.emit("tool_call", agent=AGENT, positive=call.positive, negative=call.negative,
                               scored_negative=probe.negative, span=list(call.source_span))
                    observation = self.scorer.score_probe(patient.image_ref, probe, self.vlm)
                    transcript.observations.append(observation)
                    trace.emit("tool_result", agent=AGENT, **observation.to_dict())
                    transcript.turns.append(TranscriptTurn(
                        "tool_result", f"{prefix}{TOOL_CALL_ARROW} {observation.verdict.value}\n"))

                if calls >= max_calls:
                    transcript.stop_reason = ScreeningStop.MAX_TOOL_CALLS
                    break
                if count_tokens(transcript.text) >= self.cfg.screening_token_budget:
                    transcript.stop_reason = ScreeningStop.TOKEN_BUDGET
                    break
        except BackendError as e:
            e.transcript = transcript
            raise

        trace.emit("stage_result", agent=AGENT, stage="screening", **transcript.to_dict())
        return transcript


def run_screening(patient: "PatientRecord", disease: Disease, cfg: "RunConfig",
                  llm: LLMBackend, scorer: ProbeScorer,
                  trace: BoundTrace = NULL_TRACE) -> ScreeningTranscript:
    return ScreeningAgent(llm, scorer, cfg).run(patient, disease, trace)
