"""
Disease guidelines for DxAgents.

A guideline document lists, per disease, the fine-grained image findings
the screening agent probes for. Diseases may alternatively be described in
unstructured prose, from which findings are extracted with an LLM call.
"""

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from .constants import (
    CONDITION_PLACEHOLDER,
    DEFAULT_MAX_RETRIES,
    DEFAULT_MAX_TOKENS,
    EXTRACTION_TEMPLATE,
    PROSE_PLACEHOLDER,
    RESERVED_TOKENS,
)
from .errors import (
    ExtractionEmpty,
    GuidelineParseError,
    GuidelineValidationError,
    PreconditionError,
)
from .file_handler import UTF8_BOM, FileHandler
from .llm_client import Conversation, LLMBackend, SamplingParams

logger = logging.getLogger(__name__)

_BULLET = re.compile(r"^\s*[-*]\s+(.*\S)\s*$")
_NEGATED = re.compile(r"^(no|not|without|absence of|absent)\b", re.IGNORECASE)


def _finding_problem(description: str) -> Optional[str]:
    if not description.strip():
        return "finding description is empty"
    for token in RESERVED_TOKENS:
        if token in description:
            return f"finding {description!r} contains reserved token {token!r}"
    if "\n" in description:
        return f"finding {description!r} spans several lines"
    return None


@dataclass(frozen=True)
class Finding:
    description: str

    def __post_init__(self) -> None:
        problem = _finding_problem(self.description)
        if problem:
            raise GuidelineValidationError(problem)


@dataclass(frozen=True)
class Disease:
    name: str
    findings: Tuple[Finding, ...]

    def __post_init__(self) -> None:
        if not self.name.strip():
            raise GuidelineValidationError("disease name is empty")
        if not self.findings:
            raise GuidelineValidationError(f"disease {self.name!r} has no findings")
        seen = set()
        for finding in self.findings:
            key = finding.description.casefold()
            if key in seen:
                raise GuidelineValidationError(
                    f"disease {self.name!r} lists finding {finding.description!r} twice"
                )
            seen.add(key)

    @property
    def descriptions(self) -> List[str]:
        return [f.description for f in self.findings]


@dataclass(frozen=True)
class GuidelineSet:
    diseases: Tuple[Disease, ...]
    no_finding_label: Optional[str] = None

    def __post_init__(self) -> None:
        seen = set()
        for disease in self.diseases:
            key = disease.name.casefold()
            if key in seen:
                raise GuidelineValidationError(f"duplicate disease {disease.name!r}")
            seen.add(key)
        if self.no_finding_label is not None and self.no_finding_label.casefold() in seen:
            raise GuidelineValidationError(
                f"no-finding label {self.no_finding_label!r} collides with a disease name"
            )

    @property
    def names(self) -> List[str]:
        return [d.name for d in self.diseases]

    def get(self, name: str) -> Optional[Disease]:
        """Case-insensitive lookup of a disease by name."""
        key = name.casefold()
        for disease in self.diseases:
            if disease.name.casefold() == key:
                return disease
        return None

    def is_no_finding(self, label: str) -> bool:
        return self.no_finding_label is not None and label.casefold() == self.no_finding_label.casefold()


def render_finding_block(disease: Disease) -> str:
    """One finding per line, in guideline order, without a trailing newline."""
    return "\n".join(disease.descriptions)


def _line_of(text: str, needle: str) -> int:
    pos = text.find(needle)
    return text.count("\n", 0, pos) + 1 if pos >= 0 else 1


def _parse_document(raw: bytes) -> Tuple[Dict[str, Any], str]:
    if raw.startswith(UTF8_BOM):
        raise GuidelineParseError(1, "byte-order mark is not allowed")
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise GuidelineParseError(raw.count(b"\n", 0, e.start) + 1, "invalid UTF-8")
    if not text.strip():
        raise GuidelineParseError(1, "empty document")
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise GuidelineParseError(e.lineno, e.msg)
    if not isinstance(document, dict):
        raise GuidelineParseError(1, "top level must be an object")
    return document, text


def load_guidelines(path: Union[str, Path], llm: Optional[LLMBackend] = None,
                    max_retries: int = DEFAULT_MAX_RETRIES) -> GuidelineSet:
    """
    Load and validate a guideline document.

    Args:
        path: JSON guideline file.
        llm: Backend used to extract findings from diseases given as prose.
            Without one the document is only parsed and prose diseases are rejected.
        max_retries: Extraction attempts per prose description.

    Returns:
        Validated GuidelineSet, order preserved from the file.

    Raises:
        FileNotFoundError: If path does not exist.
        GuidelineParseError: On malformed documents.
        GuidelineValidationError: On invariant violations.
    """
    raw = FileHandler().read_bytes(path)
    document, text = _parse_document(raw)

    no_finding = document.get("no_finding_label")
    if no_finding is not None and (not isinstance(no_finding, str) or not no_finding.strip()):
        raise GuidelineParseError(_line_of(text, '"no_finding_label"'), "no_finding_label must be a non-empty string")

    entries = document.get("diseases")
    if not isinstance(entries, list):
        raise GuidelineParseError(_line_of(text, '"diseases"'), "'diseases' must be a list")
    if not entries:
        raise GuidelineValidationError("guideline document lists no diseases")

    diseases = []
    for index, entry in enumerate(entries):
        if not isinstance(entry, dict) or not isinstance(entry.get("name"), str):
            raise GuidelineParseError(_line_of(text, '"diseases"'), f"disease entry {index} needs a string 'name'")
        name = entry["name"]
        line = _line_of(text, json.dumps(name, ensure_ascii=False))
        if "findings" in entry:
            findings = entry["findings"]
            if not isinstance(findings, list) or not all(isinstance(f, str) for f in findings):
                raise GuidelineParseError(line, f"findings of {name!r} must be a list of strings")
            diseases.append(Disease(name, tuple(Finding(f) for f in findings)))
        elif isinstance(entry.get("description"), str):
            if llm is None:
                raise GuidelineValidationError(
                    f"disease {name!r} is given as prose; an LLM backend is required to extract findings"
                )
            diseases.append(Disease(name, tuple(extract_findings(entry["description"], name, llm,
                                                                 max_retries=max_retries))))
        else:
            raise GuidelineParseError(line, f"disease {name!r} needs 'findings' or 'description'")

    guidelines = GuidelineSet(tuple(diseases), no_finding)
    logger.debug(f"Loaded {len(guidelines.diseases)} diseases from {path}")
    return guidelines


def parse_bullets(text: str) -> List[str]:
    """Dash- or asterisk-prefixed lines, bullet markers stripped; other lines ignored."""
    bullets = []
    for line in text.splitlines():
        match = _BULLET.match(line)
        if match:
            bullets.append(match.group(1))
    return bullets


def _accept_bullets(bullets: Sequence[str]) -> Optional[List[Finding]]:
    findings: List[Finding] = []
    seen = set()
    for bullet in bullets:
        if _finding_problem(bullet) or _NEGATED.match(bullet):
            return None
        if bullet.casefold() not in seen:
            seen.add(bullet.casefold())
            findings.append(Finding(bullet))
    return findings or None


def extract_findings(prose: str, disease_name: str, llm: LLMBackend,
                     max_retries: int = DEFAULT_MAX_RETRIES,
                     temperature: float = 0.0,
                     template: Optional[str] = None) -> List[Finding]:
    """
    Extract positively phrased findings from an unstructured description.

    An attempt is accepted only if every bullet passes the Finding invariants
    and none is negated; otherwise the LLM is asked again.

    Args:
        prose: Disease description.
        disease_name: Disease label substituted into the prompt.
        llm: Text-generation backend.
        max_retries: Number of attempts.
        temperature: Sampling temperature.
        template: Prompt template override.

    Returns:
        At least one Finding.

    Raises:
        ExtractionEmpty: If no attempt yields an acceptable list.
    """
    if not prose or not prose.strip():
        raise PreconditionError("prose must be non-empty")
    if template is None:
        template = FileHandler().read_template(EXTRACTION_TEMPLATE)
    prompt = template.replace(CONDITION_PLACEHOLDER, disease_name).replace(PROSE_PLACEHOLDER, prose.strip())
    conv = Conversation.from_user(prompt)
    params = SamplingParams(temperature=temperature, max_tokens=DEFAULT_MAX_TOKENS)

    for attempt in range(1, max(1, max_retries) + 1):
        completion = llm.generate(conv, params)
        findings = _accept_bullets(parse_bullets(completion.text))
        if findings:
            return findings
        logger.warning(f"Finding extraction for {disease_name!r} attempt {attempt} gave no usable bullets")
    raise ExtractionEmpty(f"no parseable finding for {disease_name!r} after {max_retries} attempts")
