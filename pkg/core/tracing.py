"""
JSON Lines run traces for DxAgents.

A trace is the data product of a run: one record per agent turn, tool call
and stage result, each stamped with a monotonic sequence number and an
ISO-8601 timestamp. Concurrent patient tasks share one serialized writer.
"""

import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, TextIO, Union

from .errors import TraceError
from .utils import utc_timestamp

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

RECORD_KINDS = frozenset({
    "run_header",
    "prompt",
    "completion",
    "tool_call",
    "tool_result",
    "parse_event",
    "stage_result",
    "patient_result",
})

# Fields that change between otherwise identical runs.
TIMING_FIELDS = frozenset({"ts", "timing"})


class TraceWriter:
    """
    Serialized JSONL sink.

    Records are written and flushed one line at a time under a lock, so a
    crash leaves at most one partial line. With no path the writer keeps
    records in memory.
    """

    def __init__(self, path: Optional[PathLike] = None, append: bool = False, start_seq: int = 0):
        self.path = Path(path) if path is not None else None
        self.records: List[Dict[str, Any]] = []
        self._seq = start_seq
        self._lock = threading.Lock()
        self._handle: Optional[TextIO] = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if append:
                drop_partial_line(self.path)
            self._handle = self.path.open("a" if append else "w", encoding="utf-8")

    def emit(self, kind: str, patient_id: Optional[str] = None, disease: Optional[str] = None,
             **payload: Any) -> Dict[str, Any]:
        if kind not in RECORD_KINDS:
            raise TraceError(f"unknown trace record kind {kind!r}")
        with self._lock:
            record: Dict[str, Any] = {
                "seq": self._seq,
                "ts": utc_timestamp(),
                "kind": kind,
                "patient_id": patient_id,
                "disease": disease,
            }
            record.update(payload)
            self._seq += 1
            if self._handle is not None:
                self._handle.write(json.dumps(record, ensure_ascii=False) + "\n")
                self._handle.flush()
            else:
                self.records.append(record)
        return record

    def bind(self, patient_id: str) -> "BoundTrace":
        return BoundTrace(self, patient_id)

    def close(self) -> None:
        with self._lock:
            if self._handle is not None:
                self._handle.close()
                self._handle = None

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


class BoundTrace:
    """A trace view with patient id and, optionally, disease filled in."""

    def __init__(self, writer: Optional[TraceWriter], patient_id: Optional[str] = None,
                 disease: Optional[str] = None):
        self.writer = writer
        self.patient_id = patient_id
        self.disease = disease

    def for_disease(self, disease: Optional[str]) -> "BoundTrace":
        return BoundTrace(self.writer, self.patient_id, disease)

    def emit(self, kind: str, **payload: Any) -> Optional[Dict[str, Any]]:
        if self.writer is None:
            return None
        payload.setdefault("disease", self.disease)
        return self.writer.emit(kind, patient_id=self.patient_id, **payload)


NULL_TRACE = BoundTrace(None)


def drop_partial_line(path: Path) -> None:
    """Cut an unterminated last line left by an interrupted writer."""
    if not path.is_file():
        return
    data = path.read_bytes()
    if not data or data.endswith(b"\n"):
        return
    keep = data.rfind(b"\n") + 1
    logger.warning(f"Dropping {len(data) - keep} bytes of partial trace record from {path}")
    with path.open("r+b") as handle:
        handle.truncate(keep)


@dataclass
class TraceLog:
    """Parsed trace file."""

    records: List[Dict[str, Any]] = field(default_factory=list)
    truncated: bool = False

    @property
    def last_seq(self) -> int:
        return max((r.get("seq", -1) for r in self.records), default=-1)

    @property
    def header(self) -> Optional[Dict[str, Any]]:
        """The most recent run_header."""
        for record in reversed(self.records):
            if record.get("kind") == "run_header":
                return record
        return None

    def patient_ids(self) -> List[str]:
        seen: Dict[str, None] = {}
        for record in self.records:
            pid = record.get("patient_id")
            if pid is not None:
                seen.setdefault(pid, None)
        return list(seen)

    def patient_results(self) -> Dict[str, Dict[str, Any]]:
        """Latest patient_result payload per patient id."""
        results: Dict[str, Dict[str, Any]] = {}
        for record in self.records:
            if record.get("kind") == "patient_result":
                results[record["patient_id"]] = record["result"]
        return results

    def _segments(self) -> List[List[Dict[str, Any]]]:
        segments: List[List[Dict[str, Any]]] = [[]]
        for record in self.records:
            if record.get("kind") == "run_header" and segments[-1]:
                segments.append([])
            segments[-1].append(record)
        return segments

    def patient_records(self, patient_id: str) -> List[Dict[str, Any]]:
        """
        Records of one patient's most relevant attempt, in sequence order.

        A resumed run may hold an abandoned partial attempt followed by a
        complete one; the last run segment with a patient_result wins,
        otherwise the last segment mentioning the patient.
        """
        chosen: List[Dict[str, Any]] = []
        for segment in self._segments():
            mine = [r for r in segment if r.get("patient_id") == patient_id]
            if not mine:
                continue
            if any(r.get("kind") == "patient_result" for r in mine):
                chosen = mine
            elif not any(r.get("kind") == "patient_result" for r in chosen):
                chosen = mine
        return chosen


def read_trace(path: PathLike) -> TraceLog:
    """
    Parse a trace file.

    An unparseable last line is tolerated and flagged as truncated; an
    unparseable line anywhere else raises TraceError.

    Raises:
        FileNotFoundError: If the file does not exist.
        TraceError: On corrupt records.
    """
    trace_path = Path(path)
    if not trace_path.is_file():
        raise FileNotFoundError(f"No such trace file: {trace_path}")
    lines = trace_path.read_text(encoding="utf-8").splitlines()
    log = TraceLog()
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            if number == len(lines):
                logger.warning(f"Trace {trace_path} ends with a truncated record (line {number})")
                log.truncated = True
                break
            raise TraceError(f"{trace_path}:{number}: {e.msg}")
        if not isinstance(record, dict) or "kind" not in record:
            raise TraceError(f"{trace_path}:{number}: not a trace record")
        log.records.append(record)
    return log


def strip_timing(value: Any) -> Any:
    """Recursively drop timestamp and timing fields, for run-to-run comparison."""
    if isinstance(value, dict):
        return {k: strip_timing(v) for k, v in value.items() if k not in TIMING_FIELDS}
    if isinstance(value, list):
        return [strip_timing(v) for v in value]
    return value
