"""Console rendering of patient traces."""

from typing import Any, Dict, List, Sequence

from rich.console import Console


def _yes_no(value: Any) -> str:
    if value is None:
        return "unparsed"
    return "yes" if value else "no"


def render_patient(records: Sequence[Dict[str, Any]]) -> List[str]:
    """
    Lines describing one patient's run in reading order: screening calls with
    their probabilities, diagnosis reasoning, refinement questions and answers,
    then the final labels.
    """
    lines: List[str] = []
    current_disease = None
    pending_call: Dict[str, Any] = {}

    for record in sorted(records, key=lambda r: r.get("seq", 0)):
        kind = record.get("kind")
        agent = record.get("agent")
        disease = record.get("disease")

        if agent in ("screening", "diagnosis") and disease and disease != current_disease:
            current_disease = disease
            lines.append("")
            lines.append(f"== {disease}")

        if kind == "tool_call":
            pending_call = record
        elif kind == "tool_result":
            positive = pending_call.get("positive", record.get("positive"))
            negative = pending_call.get("negative", record.get("negative"))
            lines.append(f"  CLIP: {positive} / {negative} -> {record['verdict']} "
                         f"(p_positive={record['p_positive']:.4f})")
            pending_call = {}
        elif kind == "parse_event" and agent == "screening" and not record.get("ok", True):
            lines.append(f"  malformed call ({record.get('error')}): {record.get('segment', '').strip()}")
        elif kind == "stage_result" and record.get("stage") == "screening":
            lines.append(f"  screening stopped: {record.get('stop_reason')}")
        elif kind == "stage_result" and record.get("stage") == "diagnosis":
            fallback = " (fallback)" if record.get("fallback") else ""
            lines.append(f"  diagnosis: {_yes_no(record.get('prediction'))}{fallback}")
            if record.get("reasoning"):
                lines.append(f"    {record['reasoning']}")
        elif kind == "stage_result" and record.get("stage") == "refinement":
            lines.append("")
            lines.append("== Refinement")
            for answer in record.get("answers", []):
                inherited = " (kept diagnosis)" if answer.get("inherited") else ""
                lines.append(f"  {answer['question']} -> {_yes_no(answer.get('answer'))}{inherited}")
                if answer.get("reasoning"):
                    lines.append(f"    {answer['reasoning']}")
        elif kind == "patient_result":
            result = record.get("result", {})
            lines.append("")
            if result.get("error"):
                lines.append(f"Patient failed: {result['error']}")
                continue
            final = result.get("final") or {}
            positives = [label for label, value in final.get("labels", {}).items() if value]
            lines.append(f"Final labels: {', '.join(positives) if positives else '(none)'}")
            if final.get("single_label_choice"):
                lines.append(f"Single label: {final['single_label_choice']}")
            if result.get("flags"):
                lines.append(f"Flags: {', '.join(result['flags'])}")
    return lines


def print_patient(console: Console, patient_id: str, records: Sequence[Dict[str, Any]]) -> None:
    console.print(f"Patient {patient_id}", markup=False, highlight=False)
    for line in render_patient(records):
        console.print(line, markup=False, highlight=False, soft_wrap=True)
