"""
Patient pipeline for DxAgents.

For every patient the screening and diagnosis agents run once per disease,
then the refinement agent runs once over all positive diagnoses. A dataset
run processes patients on a bounded worker pool, streams every agent turn
to the JSONL trace and can resume an interrupted run from that trace.
"""

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from workers import ThreadManager

from .cache_manager import CacheManager
from .config import RunConfig
from .constants import APP_VERSION, REFINEMENT_TEMPLATE
from .diagnosis import DiagnosisAgent, DiagnosisResult
from .embedding_client import ProbeScorer, build_embedding_backend
from .errors import (
    BackendError,
    DxAgentsError,
    ManifestError,
    PatientFailed,
    PreconditionError,
    ScreeningFailed,
)
from .file_handler import FileHandler
from .guidelines import GuidelineSet, load_guidelines
from .llm_client import LLMBackend, build_llm_backend
from .refinement import (
    FinalPrediction,
    RefinementAgent,
    RefinementConfig,
    apply_no_finding_rule,
    select_single_label,
)
from .screening import ScreeningAgent, ScreeningTranscript
from .tracing import BoundTrace, TraceWriter, read_trace

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

ID_COLUMN = "patient_id"
IMAGE_COLUMN = "image_ref"

STAGE_FINAL = "final"
STAGE_DIAGNOSIS = "diagnosis"


@dataclass(frozen=True)
class PatientRecord:
    id: str
    image_ref: str
    true_labels: Dict[str, bool] = field(default_factory=dict, hash=False)


@dataclass(frozen=True)
class Manifest:
    labels: Tuple[str, ...]
    patients: Tuple[PatientRecord, ...]


def load_manifest(path: PathLike, base_dir: Optional[PathLike] = None) -> Manifest:
    """
    Read a dataset manifest.

    The CSV header is patient_id, image_ref, then one column per label.
    Label cells hold 1, 0 or nothing; an empty cell leaves that label
    unlabeled for the patient.

    Raises:
        FileNotFoundError: If the manifest does not exist.
        ManifestError: On a bad header, duplicate ids or invalid cells.
    """
    try:
        text = FileHandler(base_dir).read_text(path)
    except UnicodeDecodeError as e:
        raise ManifestError(f"{path}: invalid UTF-8 at byte {e.start}")
    reader = csv.reader(io.StringIO(text))
    try:
        header = [cell.strip() for cell in next(reader)]
    except StopIteration:
        raise ManifestError(f"{path}: empty manifest")
    if header[:2] != [ID_COLUMN, IMAGE_COLUMN]:
        raise ManifestError(f"{path}: header must start with {ID_COLUMN},{IMAGE_COLUMN}")
    labels = header[2:]
    if len(set(labels)) != len(labels) or any(not label for label in labels):
        raise ManifestError(f"{path}: label columns must be unique and non-empty")

    patients: List[PatientRecord] = []
    seen = set()
    for row_number, row in enumerate(reader, start=2):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise ManifestError(f"{path}:{row_number}: expected {len(header)} cells, got {len(row)}")
        patient_id, image_ref = row[0].strip(), row[1].strip()
        if not patient_id or not image_ref:
            raise ManifestError(f"{path}:{row_number}: patient_id and image_ref are required")
        if patient_id in seen:
            raise ManifestError(f"{path}:{row_number}: duplicate patient id {patient_id!r}")
        seen.add(patient_id)
        truth: Dict[str, bool] = {}
        for label, cell in zip(labels, row[2:]):
            cell = cell.strip()
            if cell in ("1", "0"):
                truth[label] = cell == "1"
            elif cell:
                raise ManifestError(f"{path}:{row_number}: {label} must be 0, 1 or empty, got {cell!r}")
        patients.append(PatientRecord(patient_id, image_ref, truth))
    return Manifest(tuple(labels), tuple(patients))


def condition_list_for(manifest_labels: Sequence[str], guidelines: GuidelineSet) -> List[str]:
    """
    Conditions in manifest column order, then guideline diseases the manifest lacks.

    Raises:
        ManifestError: If a manifest label has no guideline entry.
    """
    conditions: List[str] = []
    for label in manifest_labels:
        if guidelines.is_no_finding(label):
            continue
        disease = guidelines.get(label)
        if disease is None:
            raise ManifestError(f"label {label!r} has no guideline entry")
        conditions.append(disease.name)
    conditions.extend(name for name in guidelines.names if name not in conditions)
    return conditions


@dataclass
class DiseaseOutcome:
    screening: ScreeningTranscript
    diagnosis: DiagnosisResult

    def to_dict(self) -> Dict[str, Any]:
        return {"screening": self.screening.to_dict(), "diagnosis": self.diagnosis.to_dict()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DiseaseOutcome":
        return cls(ScreeningTranscript.from_dict(data["screening"]),
                   DiagnosisResult.from_dict(data["diagnosis"]))


@dataclass
class PatientResult:
    patient_id: str
    image_ref: str = ""
    final: Optional[FinalPrediction] = None
    per_disease: List[DiseaseOutcome] = field(default_factory=list)
    true_labels: Dict[str, bool] = field(default_factory=dict)
    no_finding_label: Optional[str] = None
    timing: Dict[str, float] = field(default_factory=dict)
    flags: List[str] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def predictions(self, stage: str = STAGE_FINAL) -> Dict[str, bool]:
        """Predicted labels after refinement, or before it with No Finding derived by rule."""
        if stage == STAGE_DIAGNOSIS:
            raw = {o.diagnosis.disease: o.diagnosis.prediction for o in self.per_disease}
            return apply_no_finding_rule(raw, self.no_finding_label)
        return dict(self.final.labels) if self.final else {}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "patient_id": self.patient_id,
            "image_ref": self.image_ref,
            "final": self.final.to_dict() if self.final else None,
            "per_disease": [o.to_dict() for o in self.per_disease],
            "true_labels": dict(self.true_labels),
            "no_finding_label": self.no_finding_label,
            "timing": dict(self.timing),
            "flags": list(self.flags),
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PatientResult":
        return cls(
            patient_id=data["patient_id"],
            image_ref=data.get("image_ref", ""),
            final=FinalPrediction.from_dict(data["final"]) if data.get("final") else None,
            per_disease=[DiseaseOutcome.from_dict(o) for o in data.get("per_disease", [])],
            true_labels={k: bool(v) for k, v in data.get("true_labels", {}).items()},
            no_finding_label=data.get("no_finding_label"),
            timing={k: float(v) for k, v in data.get("timing", {}).items()},
            flags=list(data.get("flags", [])),
            error=data.get("error"),
        )


ResultSet = List[PatientResult]


class DiagnosticPipeline:
    """Wires the three agents together for single patients and whole datasets."""

    def __init__(self, cfg: RunConfig, guidelines: GuidelineSet, llm: LLMBackend, scorer: ProbeScorer):
        if not guidelines.diseases:
            raise PreconditionError("guidelines must list at least one disease")
        self.cfg = cfg
        self.guidelines = guidelines
        self.llm = llm
        self.scorer = scorer
        self.screening = ScreeningAgent(llm, scorer, cfg)
        self.diagnosis = DiagnosisAgent(llm, cfg)
        self.refinement_cfg = RefinementConfig(
            use_cot=cfg.use_cot,
            include_disease_graph=cfg.include_disease_graph,
            graph_text=cfg.files.read_text(cfg.graph_path) if cfg.include_disease_graph else None,
            task_mode=cfg.task_mode,
            no_finding_label=guidelines.no_finding_label,
            temperature=cfg.temperature,
            max_tokens=cfg.refinement_max_tokens,
            max_retries=cfg.max_retries,
        )
        self.refinement = RefinementAgent(
            llm, self.refinement_cfg,
            cfg.files.read_template(REFINEMENT_TEMPLATE, cfg.refinement_template or None))
        self.conditions: List[str] = list(guidelines.names)

    @classmethod
    def from_config(cls, cfg: RunConfig, guidelines: Optional[GuidelineSet] = None) -> "DiagnosticPipeline":
        """Build backends from configuration and load guidelines (extracting prose ones with the LLM)."""
        llm = build_llm_backend(cfg)
        scorer = ProbeScorer(build_embedding_backend(cfg), CacheManager(cfg.embedding_cache_size))
        if guidelines is None:
            guidelines = load_guidelines(cfg.require("guidelines.path"), llm=llm, max_retries=cfg.max_retries)
        return cls(cfg, guidelines, llm, scorer)

    def preflight(self) -> None:
        """Check both backends answer before any patient starts."""
        self.llm.ping()
        self.scorer.backend.ping()

    # -- one patient ---------------------------------------------------------

    def _screen_and_diagnose(self, patient: PatientRecord, disease_name: str, trace: BoundTrace,
                             result: PatientResult) -> bool:
        """Run screening and diagnosis for one disease; returns False on a backend failure."""
        disease = self.guidelines.get(disease_name)
        assert disease is not None
        trace = trace.for_disease(disease.name)

        started = time.perf_counter()
        try:
            transcript = self.screening.run(patient, disease, trace)
        except ScreeningFailed as e:
            transcript = e.transcript
            result.flags.append(f"screening_failed:{disease.name}")
            logger.warning(f"Patient {patient.id}: {e}; diagnosing from partial observations")
        except BackendError as e:
            result.timing["screening"] = result.timing.get("screening", 0.0) + time.perf_counter() - started
            transcript = e.transcript or ScreeningTranscript(disease=disease.name, failed=True)
            transcript.failed = True
            result.flags.append(f"backend_error:screening:{disease.name}")
            logger.error(f"Patient {patient.id}: screening {disease.name} failed: {e}")
            result.per_disease.append(DiseaseOutcome(transcript, self._fallback(disease.name, str(e))))
            return False
        result.timing["screening"] = result.timing.get("screening", 0.0) + time.perf_counter() - started

        started = time.perf_counter()
        try:
            diagnosis = self.diagnosis.run(transcript.observations, disease.name, trace)
        except BackendError as e:
            result.flags.append(f"backend_error:diagnosis:{disease.name}")
            logger.error(f"Patient {patient.id}: diagnosis {disease.name} failed: {e}")
            diagnosis = self._fallback(disease.name, str(e))
            ok = False
        else:
            ok = True
            if diagnosis.fallback:
                result.flags.append(f"diagnosis_fallback:{disease.name}")
        result.timing["diagnosis"] = result.timing.get("diagnosis", 0.0) + time.perf_counter() - started
        result.per_disease.append(DiseaseOutcome(transcript, diagnosis))
        return ok

    @staticmethod
    def _fallback(disease: str, raw_text: str) -> DiagnosisResult:
        return DiagnosisResult(disease, False, "", 1, fallback=True, raw_text=raw_text)

    def diagnose_patient(self, patient: PatientRecord, trace: Optional[BoundTrace] = None) -> PatientResult:
        """
        Run screening and diagnosis for every disease, then refinement once.

        Per-disease failures degrade to flagged negative predictions.

        Raises:
            PatientFailed: When every backend call of the patient failed.
        """
        trace = trace if trace is not None else BoundTrace(None, patient.id)
        result = PatientResult(patient.id, patient.image_ref, true_labels=dict(patient.true_labels),
                               no_finding_label=self.guidelines.no_finding_label)
        logger.debug(f"Diagnosing patient {patient.id} ({patient.image_ref})")

        healthy = [self._screen_and_diagnose(patient, name, trace, result) for name in self.conditions]
        if not any(healthy):
            raise PatientFailed(f"patient {patient.id}: every backend call failed")

        scores = {o.diagnosis.disease: o.screening.mean_p_positive for o in result.per_disease}
        diagnoses = [o.diagnosis for o in result.per_disease]
        started = time.perf_counter()
        try:
            result.final = self.refinement.run(diagnoses, self.conditions, scores, trace.for_disease(None))
        except BackendError as e:
            logger.error(f"Patient {patient.id}: refinement failed: {e}; keeping diagnoses")
            result.flags.append("backend_error:refinement")
            result.final = FinalPrediction(
                apply_no_finding_rule({d.disease: d.prediction for d in diagnoses},
                                      self.guidelines.no_finding_label),
                per_disease_reasoning={d.disease: d.reasoning for d in diagnoses})
            if self.refinement_cfg.single_label:
                self._force_single_label(result.final, scores)
        result.timing["refinement"] = time.perf_counter() - started
        result.flags.extend(result.final.flags)
        return result

    def _force_single_label(self, final: FinalPrediction, scores: Dict[str, float]) -> None:
        nf = self.guidelines.no_finding_label
        approved = [c for c in self.conditions if final.labels.get(c)]
        choice = select_single_label(approved, scores, nf, self.conditions)
        final.single_label_choice = choice
        final.labels = {c: c == choice for c in self.conditions}
        if nf is not None:
            final.labels[nf] = choice == nf

    def _failed_result(self, patient: PatientRecord, error: str) -> PatientResult:
        return PatientResult(patient.id, patient.image_ref, true_labels=dict(patient.true_labels),
                             no_finding_label=self.guidelines.no_finding_label, error=error)

    def _run_one(self, writer: TraceWriter, patient: PatientRecord) -> PatientResult:
        trace = writer.bind(patient.id)
        try:
            result = self.diagnose_patient(patient, trace)
        except DxAgentsError as e:
            logger.error(f"Patient {patient.id} failed: {e}")
            result = self._failed_result(patient, str(e))
        except Exception as e:
            logger.exception(f"Patient {patient.id} failed unexpectedly")
            result = self._failed_result(patient, f"{type(e).__name__}: {e}")
        trace.emit("patient_result", result=result.to_dict())
        return result

    # -- datasets ------------------------------------------------------------

    def _open_trace(self, trace_path: Path) -> Tuple[TraceWriter, Dict[str, PatientResult]]:
        completed: Dict[str, PatientResult] = {}
        if self.cfg.resume and trace_path.is_file():
            log = read_trace(trace_path)
            header = log.header
            fingerprint = self.cfg.fingerprint()
            if header is not None and header.get("fingerprint") == fingerprint:
                for pid, data in log.patient_results().items():
                    result = PatientResult.from_dict(data)
                    if not result.failed:
                        completed[pid] = result
                logger.info(f"Resuming {trace_path}: {len(completed)} patients already complete")
                return TraceWriter(trace_path, append=True, start_seq=log.last_seq + 1), completed
            logger.warning(f"Trace {trace_path} was written with a different configuration "
                           f"({header.get('fingerprint') if header else 'no header'} != {fingerprint}); "
                           f"starting fresh")
        return TraceWriter(trace_path), completed

    def run_dataset(self, manifest: Union[Manifest, PathLike],
                    trace_path: Optional[PathLike] = None) -> ResultSet:
        """
        Diagnose every patient of a manifest.

        Returns:
            One PatientResult per patient, in manifest order.

        Raises:
            ManifestError: On an invalid manifest.
        """
        if not isinstance(manifest, Manifest):
            manifest = load_manifest(manifest, self.cfg.base_dir)
        self.conditions = condition_list_for(manifest.labels, self.guidelines)
        path = Path(trace_path) if trace_path is not None else self.cfg.resolve(self.cfg.trace_path)

        writer, completed = self._open_trace(path)
        with writer:
            writer.emit(
                "run_header",
                app_version=APP_VERSION,
                fingerprint=self.cfg.fingerprint(),
                config=self.cfg.as_dotted(),
                labels=list(manifest.labels),
                condition_list=list(self.conditions),
                no_finding_label=self.guidelines.no_finding_label,
                patients=[p.id for p in manifest.patients],
                llm=self.llm.describe(),
                embedding=self.scorer.backend.describe(),
                resumed=sorted(completed),
            )
            pending = [p for p in manifest.patients if p.id not in completed]
            pool = ThreadManager(self.cfg.parallelism)
            pool.set_progress_callback(
                lambda done, total: logger.info(f"Patients complete: {done}/{total}"))
            fresh = pool.map_ordered(lambda patient: self._run_one(writer, patient), pending)

        by_id = dict(completed)
        by_id.update((r.patient_id, r) for r in fresh)
        return [by_id[p.id] for p in manifest.patients if p.id in by_id]


def load_results(trace_path: PathLike) -> Tuple[Dict[str, Any], ResultSet, bool]:
    """
    Rehydrate the patient results of a trace.

    Returns:
        (latest run header, results in manifest order, truncated flag).
    """
    log = read_trace(trace_path)
    header = log.header or {}
    stored = log.patient_results()
    order = [pid for pid in header.get("patients", []) if pid in stored]
    order.extend(pid for pid in stored if pid not in order)
    return header, [PatientResult.from_dict(stored[pid]) for pid in order], log.truncated


def run_dataset(manifest: PathLike, guidelines: GuidelineSet, cfg: RunConfig) -> ResultSet:
    return DiagnosticPipeline.from_config(cfg, guidelines).run_dataset(manifest)


def diagnose_patient(patient: PatientRecord, guidelines: GuidelineSet, cfg: RunConfig) -> PatientResult:
    return DiagnosticPipeline.from_config(cfg, guidelines).diagnose_patient(patient)
