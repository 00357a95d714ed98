"""
Evaluation for DxAgents.

Micro/macro precision, recall and F1 for multi-label runs, accuracy on tail
classes for single-label runs, and text/JSON reports. Every ratio with an
empty denominator is 0.
"""

import io
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence

from rich import box
from rich.console import Console
from rich.table import Table

from .errors import EmptyTailSet, MissingGroundTruth, NotSingleLabel, PreconditionError
from .pipeline import STAGE_DIAGNOSIS, STAGE_FINAL, PatientResult

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TEXT_TABLE = "text_table"
JSON = "json"
_REPORT_WIDTH = 100


def ratio(numerator: float, denominator: float) -> float:
    return numerator / denominator if denominator else 0.0


@dataclass
class LabelCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> Dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


@dataclass
class ConfusionCounts:
    per_label: Dict[str, LabelCounts] = field(default_factory=dict)

    @property
    def labels(self) -> List[str]:
        return list(self.per_label)


@dataclass(frozen=True)
class Metrics:
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "Metrics":
        precision = ratio(tp, tp + fp)
        recall = ratio(tp, tp + fn)
        return cls(precision, recall, ratio(2 * precision * recall, precision + recall))

    def to_dict(self) -> Dict[str, float]:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Metrics":
        return cls(float(data["precision"]), float(data["recall"]), float(data["f1"]))


@dataclass
class MetricReport:
    micro: Metrics
    macro: Metrics
    per_label: Dict[str, Metrics] = field(default_factory=dict)
    counts: Dict[str, Dict[str, int]] = field(default_factory=dict)
    tail_accuracy: Optional[float] = None
    tail_labels: List[str] = field(default_factory=list)
    single_label_accuracy: Optional[float] = None
    n_patients: int = 0
    fingerprint: str = ""
    stage: str = STAGE_FINAL

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "fingerprint": self.fingerprint,
            "stage": self.stage,
            "n_patients": self.n_patients,
            "micro": self.micro.to_dict(),
            "macro": self.macro.to_dict(),
            "per_label": {label: m.to_dict() for label, m in self.per_label.items()},
            "counts": {label: dict(c) for label, c in self.counts.items()},
            "tail_labels": list(self.tail_labels),
            "tail_accuracy": self.tail_accuracy,
            "single_label_accuracy": self.single_label_accuracy,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MetricReport":
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise PreconditionError(f"unsupported report schema_version {version!r}")
        return cls(
            micro=Metrics.from_dict(data["micro"]),
            macro=Metrics.from_dict(data["macro"]),
            per_label={label: Metrics.from_dict(m) for label, m in data.get("per_label", {}).items()},
            counts={label: {k: int(v) for k, v in c.items()} for label, c in data.get("counts", {}).items()},
            tail_accuracy=data.get("tail_accuracy"),
            tail_labels=list(data.get("tail_labels", [])),
            single_label_accuracy=data.get("single_label_accuracy"),
            n_patients=int(data.get("n_patients", 0)),
            fingerprint=data.get("fingerprint", ""),
            stage=data.get("stage", STAGE_FINAL),
        )


def confusion_counts(results: Sequence[PatientResult], labels: Sequence[str],
                     stage: str = STAGE_FINAL) -> ConfusionCounts:
    """
    Per-label confusion counts.

    Unlabeled (patient, label) pairs are skipped. A failed patient counts
    as predicting every label negative.

    Raises:
        MissingGroundTruth: If a patient has no ground truth for any label.
    """
    counts = ConfusionCounts({label: LabelCounts() for label in labels})
    for result in results:
        if labels and not any(label in result.true_labels for label in labels):
            raise MissingGroundTruth(f"patient {result.patient_id} has no ground truth for {list(labels)}")
        predicted = result.predictions(stage)
        for label in labels:
            if label not in result.true_labels:
                continue
            truth = result.true_labels[label]
            guess = predicted.get(label, False)
            c = counts.per_label[label]
            if truth and guess:
                c.tp += 1
            elif guess:
                c.fp += 1
            elif truth:
                c.fn += 1
            else:
                c.tn += 1
    return counts


def micro_macro_metrics(counts: ConfusionCounts) -> MetricReport:
    """Micro metrics over summed counts, macro as the unweighted mean of per-label metrics."""
    per_label = {label: Metrics.from_counts(c.tp, c.fp, c.fn) for label, c in counts.per_label.items()}
    micro = Metrics.from_counts(
        sum(c.tp for c in counts.per_label.values()),
        sum(c.fp for c in counts.per_label.values()),
        sum(c.fn for c in counts.per_label.values()),
    )
    n = len(per_label)
    macro = Metrics(
        ratio(sum(m.precision for m in per_label.values()), n),
        ratio(sum(m.recall for m in per_label.values()), n),
        ratio(sum(m.f1 for m in per_label.values()), n),
    )
    return MetricReport(micro, macro, per_label,
                        {label: c.to_dict() for label, c in counts.per_label.items()})


def _true_single_label(result: PatientResult) -> str:
    positives = [label for label, value in result.true_labels.items() if value]
    if len(positives) != 1:
        raise PreconditionError(
            f"patient {result.patient_id} has {len(positives)} positive labels, expected exactly one")
    return positives[0]


def _choices(results: Sequence[PatientResult]) -> Dict[str, Optional[str]]:
    choices: Dict[str, Optional[str]] = {}
    for result in results:
        if result.failed:
            choices[result.patient_id] = None
            continue
        if result.final is None or result.final.single_label_choice is None:
            raise NotSingleLabel(f"patient {result.patient_id} has no single-label choice")
        choices[result.patient_id] = result.final.single_label_choice
    return choices


def tail_accuracy(results: Sequence[PatientResult], tail_labels: Iterable[str]) -> float:
    """
    Fraction of tail-class patients whose single label is exactly their true label.

    Raises:
        NotSingleLabel: If a result carries no single-label choice.
        EmptyTailSet: If no patient's true label is a tail class.
    """
    tail = set(tail_labels)
    choices = _choices(results)
    hits = total = 0
    for result in results:
        truth = _true_single_label(result)
        if truth not in tail:
            continue
        total += 1
        hits += choices[result.patient_id] == truth
    if total == 0:
        raise EmptyTailSet(f"no patient belongs to the tail classes {sorted(tail)}")
    return hits / total


def single_label_accuracy(results: Sequence[PatientResult]) -> float:
    """Fraction of all patients whose single label is exactly their true label."""
    choices = _choices(results)
    hits = sum(choices[r.patient_id] == _true_single_label(r) for r in results)
    return ratio(hits, len(results))


def evaluate(results: Sequence[PatientResult], labels: Sequence[str],
             stage: str = STAGE_FINAL, tail_labels: Sequence[str] = (),
             single_label: bool = False, fingerprint: str = "") -> MetricReport:
    """Build a complete report for a result set."""
    if stage not in (STAGE_FINAL, STAGE_DIAGNOSIS):
        raise PreconditionError(f"unknown evaluation stage {stage!r}")
    report = micro_macro_metrics(confusion_counts(results, labels, stage))
    report.n_patients = len(results)
    report.fingerprint = fingerprint
    report.stage = stage
    if single_label and stage == STAGE_FINAL:
        report.single_label_accuracy = single_label_accuracy(results)
        if tail_labels:
            report.tail_labels = list(tail_labels)
            report.tail_accuracy = tail_accuracy(results, tail_labels)
    return report


def _render(table: Table) -> str:
    buffer = io.StringIO()
    console = Console(file=buffer, width=_REPORT_WIDTH, color_system=None, force_terminal=False,
                      highlight=False, emoji=False)
    console.print(table)
    return buffer.getvalue()


def _fmt(value: float) -> str:
    return f"{value:.4f}"


def emit_report(report: MetricReport, fmt: str = TEXT_TABLE) -> str:
    """
    Render a report.

    text_table: an F1 / Precision / Recall x micro / macro summary followed by
    per-label rows and, for single-label runs, the accuracies.
    json: the schema-versioned report dictionary.
    """
    if fmt == JSON:
        return json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if fmt != TEXT_TABLE:
        raise PreconditionError(f"unknown report format {fmt!r}")

    summary = Table(title=f"Metrics ({report.stage}, {report.n_patients} patients, "
                          f"config {report.fingerprint or '-'})", box=box.ASCII)
    for heading in ("micro F1", "macro F1", "micro Precision", "macro Precision",
                    "micro Recall", "macro Recall"):
        summary.add_column(heading, justify="right")
    summary.add_row(_fmt(report.micro.f1), _fmt(report.macro.f1),
                    _fmt(report.micro.precision), _fmt(report.macro.precision),
                    _fmt(report.micro.recall), _fmt(report.macro.recall))

    labels = Table(title="Per label", box=box.ASCII)
    for heading in ("label", "F1", "Precision", "Recall", "tp", "fp", "fn", "tn"):
        labels.add_column(heading, justify="left" if heading == "label" else "right")
    for label, m in report.per_label.items():
        c = report.counts.get(label, {})
        labels.add_row(label, _fmt(m.f1), _fmt(m.precision), _fmt(m.recall),
                       *(str(c.get(k, 0)) for k in ("tp", "fp", "fn", "tn")))

    document = _render(summary) + _render(labels)
    if report.single_label_accuracy is not None:
        document += f"single-label accuracy: {_fmt(report.single_label_accuracy)}\n"
    if report.tail_accuracy is not None:
        document += f"tail accuracy ({', '.join(report.tail_labels)}): {_fmt(report.tail_accuracy)}\n"
    return document


@dataclass(frozen=True)
class ComparisonRow:
    negation_mode: str
    use_cot: bool
    include_disease_graph: bool
    report: MetricReport


def emit_comparison(rows: Sequence[ComparisonRow]) -> str:
    """Side-by-side table of ablation runs: negation | CoT | DG | micro F1 | macro F1."""
    table = Table(title="Ablation", box=box.ASCII)
    for heading in ("negation", "CoT", "DG", "micro F1", "macro F1", "config"):
        table.add_column(heading, justify="right" if "F1" in heading else "left")
    for row in rows:
        table.add_row(row.negation_mode, "yes" if row.use_cot else "no",
                      "yes" if row.include_disease_graph else "no",
                      _fmt(row.report.micro.f1), _fmt(row.report.macro.f1),
                      row.report.fingerprint or "-")
    return _render(table)
