"""
Refinement agent for DxAgents.

The refinement agent sees every positive diagnosis with its reasoning,
acknowledges the task, and is then asked about each condition in turn.
"No Finding" is derived by rule, and in single-label mode exactly one
label is selected from the approved conditions.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

from .config import MULTI_LABEL, SINGLE_LABEL
from .constants import (
    CONDITION_LIST_PLACEHOLDER,
    DEFAULT_MAX_RETRIES,
    DEFAULT_MAX_TOKENS,
    DEFAULT_TEMPERATURE,
    DIAGNOSES_PLACEHOLDER,
    REFINEMENT_TEMPLATE,
)
from .diagnosis import DiagnosisResult, ask_for_answer
from .errors import PreconditionError
from .file_handler import FileHandler
from .llm_client import Conversation, LLMBackend, SamplingParams
from .tracing import NULL_TRACE, BoundTrace

logger = logging.getLogger(__name__)

AGENT = "refinement"

QUESTION = "Does the patient have {condition}?"
BARE_ANSWER_DEMAND = "Answer without reasoning and reply only with the exact sentence."

FLAG_ACK_MISSING = "acknowledgment_missing"
FLAG_INHERITED = "refinement_inherited"


@dataclass(frozen=True)
class RefinementConfig:
    use_cot: bool = True
    include_disease_graph: bool = False
    graph_text: Optional[str] = None
    task_mode: str = MULTI_LABEL
    no_finding_label: Optional[str] = None
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    max_retries: int = DEFAULT_MAX_RETRIES

    def __post_init__(self) -> None:
        if self.include_disease_graph and not (self.graph_text and self.graph_text.strip()):
            raise PreconditionError("include_disease_graph requires graph_text")
        if self.task_mode not in (MULTI_LABEL, SINGLE_LABEL):
            raise PreconditionError(f"unknown task mode {self.task_mode!r}")

    @property
    def single_label(self) -> bool:
        return self.task_mode == SINGLE_LABEL


@dataclass
class FinalPrediction:
    labels: Dict[str, bool]
    single_label_choice: Optional[str] = None
    per_disease_reasoning: Dict[str, str] = field(default_factory=dict)
    answers: List[Dict[str, Any]] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)

    @property
    def positives(self) -> List[str]:
        return [label for label, value in self.labels.items() if value]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "labels": dict(self.labels),
            "single_label_choice": self.single_label_choice,
            "per_disease_reasoning": dict(self.per_disease_reasoning),
            "answers": list(self.answers),
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FinalPrediction":
        return cls(
            labels={k: bool(v) for k, v in data["labels"].items()},
            single_label_choice=data.get("single_label_choice"),
            per_disease_reasoning=dict(data.get("per_disease_reasoning", {})),
            answers=list(data.get("answers", [])),
            flags=list(data.get("flags", [])),
        )


def render_diagnoses(positives: Sequence[DiagnosisResult]) -> str:
    return "\n\n".join(f"Condition: {d.disease}\nReasoning: {d.reasoning}" for d in positives)


def build_refinement_prompt(positives: Sequence[DiagnosisResult], condition_list: Sequence[str],
                            cfg: RefinementConfig, template: Optional[str] = None) -> Conversation:
    if not condition_list:
        raise PreconditionError("condition_list must be non-empty")
    if template is None:
        template = FileHandler().read_template(REFINEMENT_TEMPLATE)
    conditions = "\n".join(condition_list)
    if cfg.include_disease_graph and cfg.graph_text:
        conditions += "\n\n" + cfg.graph_text.strip("\n")
    prompt = (template
              .replace(CONDITION_LIST_PLACEHOLDER, conditions)
              .replace(DIAGNOSES_PLACEHOLDER, render_diagnoses(positives)))
    return Conversation.from_user(prompt)


def refinement_question(condition: str, use_cot: bool) -> str:
    question = QUESTION.format(condition=condition)
    return question if use_cot else f"{question} {BARE_ANSWER_DEMAND}"


def apply_no_finding_rule(labels: Mapping[str, bool], no_finding_label: Optional[str]) -> Dict[str, bool]:
    """Set the no-finding label to true iff every other label is false."""
    result = {k: v for k, v in labels.items() if k != no_finding_label}
    if no_finding_label is not None:
        result[no_finding_label] = not any(result.values())
    return result


def select_single_label(approved: Iterable[str], scores: Mapping[str, float],
                        no_finding_label: Optional[str] = None,
                        condition_order: Optional[Sequence[str]] = None) -> str:
    """
    Pick exactly one label.

    One approved label is returned as is. Several are ranked by score with
    ties going to the earlier condition. With none approved the no-finding
    label wins when present, otherwise the highest-scoring condition.

    Args:
        approved: Labels the refinement agent answered "yes" for.
        scores: Mean screening p_positive per condition.
        no_finding_label: Absence label, if the dataset has one.
        condition_order: Tie-break order; defaults to the order of scores.
    """
    order = list(condition_order) if condition_order is not None else list(scores)
    rank = {label: index for index, label in enumerate(order)}

    def key(label: str) -> Any:
        return (-scores.get(label, 0.0), rank.get(label, len(order)), label)

    candidates = sorted(set(approved), key=key)
    if len(candidates) >= 1:
        return candidates[0]
    if no_finding_label is not None:
        return no_finding_label
    pool = sorted(set(order) | set(scores), key=key)
    if not pool:
        raise PreconditionError("no condition to choose from")
    return pool[0]


class RefinementAgent:
    """Cross-checks positive diagnoses and issues the final per-condition verdicts."""

    def __init__(self, llm: LLMBackend, cfg: RefinementConfig, template: Optional[str] = None):
        self.llm = llm
        self.cfg = cfg
        self.template = template

    def _acknowledge(self, conv: Conversation, params: SamplingParams, flags: List[str],
                     trace: BoundTrace) -> Conversation:
        trace.emit("prompt", agent=AGENT, messages=conv.to_messages())
        completion = self.llm.generate(conv, params)
        trace.emit("completion", agent=AGENT, **completion.to_dict())
        if "ok" not in completion.text.casefold():
            logger.warning(f"Refinement agent did not acknowledge the task: {completion.text[:80]!r}")
            flags.append(FLAG_ACK_MISSING)
        return conv.with_assistant(completion.text)

    def run(self, diagnoses: Sequence[DiagnosisResult], condition_list: Sequence[str],
            scores: Mapping[str, float], trace: BoundTrace = NULL_TRACE) -> FinalPrediction:
        diagnosed = {d.disease: d for d in diagnoses}
        missing = [d for d in diagnosed if d not in condition_list]
        if missing:
            raise PreconditionError(f"diagnosed conditions {missing} are not in the condition list")
        positives = [d for d in diagnoses if d.prediction]

        params = SamplingParams(temperature=self.cfg.temperature, max_tokens=self.cfg.max_tokens)
        flags: List[str] = []
        conv = build_refinement_prompt(positives, condition_list, self.cfg, self.template)
        conv = self._acknowledge(conv, params, flags, trace)

        labels: Dict[str, bool] = {}
        reasoning: Dict[str, str] = {}
        answers: List[Dict[str, Any]] = []
        for condition in condition_list:
            question = refinement_question(condition, self.cfg.use_cot)
            exchange = ask_for_answer(self.llm, conv.with_user(question), params,
                                      self.cfg.max_retries, trace.for_disease(condition), AGENT)
            conv = exchange.conversation
            inherited = not exchange.parsed
            if inherited:
                prior = diagnosed.get(condition)
                labels[condition] = bool(prior and prior.prediction)
                reasoning[condition] = prior.reasoning if prior else ""
                flags.append(f"{FLAG_INHERITED}:{condition}")
                logger.warning(f"Refinement answer for {condition} unparseable, keeping diagnosis "
                               f"{labels[condition]}")
            else:
                labels[condition] = bool(exchange.prediction)
                reasoning[condition] = exchange.reasoning
            answers.append({
                "condition": condition,
                "question": question,
                "answer": exchange.prediction,
                "reasoning": exchange.reasoning,
                "attempts": exchange.attempts,
                "inherited": inherited,
            })

        nf = self.cfg.no_finding_label
        choice: Optional[str] = None
        if self.cfg.single_label:
            approved = [c for c in condition_list if labels[c]]
            choice = select_single_label(approved, scores, nf, condition_list)
            final = {c: c == choice for c in condition_list}
            if nf is not None:
                final[nf] = choice == nf
        else:
            final = apply_no_finding_rule(labels, nf)

        prediction = FinalPrediction(final, choice, reasoning, answers, flags)
        trace.emit("stage_result", agent=AGENT, stage="refinement", **prediction.to_dict())
        return prediction


def run_refinement(diagnoses: Sequence[DiagnosisResult], condition_list: Sequence[str],
                   scores: Mapping[str, float], cfg: RefinementConfig, llm: LLMBackend,
                   trace: BoundTrace = NULL_TRACE, template: Optional[str] = None) -> FinalPrediction:
    return RefinementAgent(llm, cfg, template).run(diagnoses, condition_list, scores, trace)
