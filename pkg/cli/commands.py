"""
Command-line interface for DxAgents.

Commands: run, eval, inspect, ablate, validate. Exit codes are 0 on
success, 1 on fatal errors and 2 on partial failures (failed patients,
truncated traces).
"""

import argparse
import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

from rich.console import Console

from core.config import ABLATION_KEYS, RunConfig, load_config
from core.constants import APP_VERSION, DIAGNOSIS_TEMPLATE, REFINEMENT_TEMPLATE, SCREENING_TEMPLATE
from core.errors import ConfigError, DxAgentsError, PatientNotFound
from core.evaluation import (
    JSON,
    TEXT_TABLE,
    ComparisonRow,
    MetricReport,
    emit_comparison,
    emit_report,
    evaluate,
)
from core.guidelines import load_guidelines
from core.pipeline import (
    STAGE_DIAGNOSIS,
    STAGE_FINAL,
    DiagnosticPipeline,
    Manifest,
    PatientResult,
    condition_list_for,
    load_manifest,
    load_results,
)
from core.tracing import read_trace

from .error_handler import EXIT_FATAL, EXIT_OK, EXIT_PARTIAL, ErrorHandler, configure_logging
from .rendering import print_patient

logger = logging.getLogger(__name__)


def _console() -> Console:
    return Console(soft_wrap=True, highlight=False)


def _print(console: Console, text: str) -> None:
    console.print(text.rstrip("\n"), markup=False, highlight=False, soft_wrap=True)


def _evaluation_labels(labels: Sequence[str], exclude: Sequence[str]) -> List[str]:
    excluded = {label.casefold() for label in exclude}
    return [label for label in labels if label.casefold() not in excluded]


def _build_report(results: Sequence[PatientResult], labels: Sequence[str], exclude: Sequence[str],
                  stage: str, tail_labels: Sequence[str], single_label: bool,
                  fingerprint: str) -> Optional[MetricReport]:
    if not any(r.true_labels for r in results):
        return None
    return evaluate(results, _evaluation_labels(labels, exclude), stage, tail_labels,
                    single_label, fingerprint)


def execute_run(cfg: RunConfig, console: Console) -> Tuple[int, Optional[MetricReport]]:
    """
    Run the whole dataset for one configuration and write its metrics.

    Returns:
        (exit code, report or None without ground truth).
    """
    cfg.require("guidelines.path")
    manifest_path = cfg.require("dataset.manifest")
    manifest: Manifest = load_manifest(manifest_path)

    pipeline = DiagnosticPipeline.from_config(cfg)
    condition_list_for(manifest.labels, pipeline.guidelines)
    pipeline.preflight()

    results = pipeline.run_dataset(manifest)
    failed = [r.patient_id for r in results if r.failed]

    report = _build_report(results, manifest.labels, cfg.exclude_labels, cfg.evaluation_stage,
                           cfg.tail_labels, cfg.single_label, cfg.fingerprint())
    if report is None:
        ErrorHandler(console).show_warning("NO_GROUND_TRUTH")
    else:
        metrics_path = cfg.metrics_path
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        metrics_path.write_text(emit_report(report, JSON), encoding="utf-8")
        _print(console, emit_report(report, TEXT_TABLE))
        logger.info(f"Metrics written to {metrics_path}")

    _print(console, f"{len(results)} patients, {len(failed)} failed, trace {cfg.resolve(cfg.trace_path)}")
    if failed:
        ErrorHandler(console).show_warning("PARTIAL_FAILURE", ", ".join(failed))
        return EXIT_PARTIAL, report
    return EXIT_OK, report


def cmd_run(config: str, overrides: Sequence[str] = (), console: Optional[Console] = None) -> int:
    console = console or _console()
    try:
        cfg = load_config(config, overrides)
        code, _ = execute_run(cfg, console)
        return code
    except (DxAgentsError, FileNotFoundError) as e:
        return ErrorHandler(console).handle_exception(e, "run")


def cmd_eval(traces: str, tail: Sequence[str] = (), exclude: Sequence[str] = (),
             stage: Optional[str] = None, fmt: str = TEXT_TABLE,
             console: Optional[Console] = None) -> int:
    console = console or _console()
    handler = ErrorHandler(console)
    try:
        header, results, truncated = load_results(traces)
        config: Dict[str, Any] = header.get("config", {})
        labels = header.get("labels") or sorted({k for r in results for k in r.true_labels})
        report = _build_report(
            results,
            labels,
            list(exclude) or config.get("evaluation.exclude_labels", []),
            stage or config.get("evaluation.stage", STAGE_FINAL),
            list(tail) or config.get("evaluation.tail_labels", []),
            config.get("run.task_mode") == "single_label",
            header.get("fingerprint", ""),
        )
        if report is None:
            handler.show_warning("NO_GROUND_TRUTH")
            return EXIT_FATAL
        _print(console, emit_report(report, fmt))
        if truncated:
            handler.show_warning("TRUNCATED_TRACE", str(traces))
            return EXIT_PARTIAL
        return EXIT_OK
    except (DxAgentsError, FileNotFoundError) as e:
        return handler.handle_exception(e, "eval")


def cmd_inspect(traces: str, patient_id: str, console: Optional[Console] = None) -> int:
    console = console or _console()
    handler = ErrorHandler(console)
    try:
        log = read_trace(traces)
        records = log.patient_records(patient_id)
        if not records:
            known = log.patient_ids()
            listed = ", ".join(known[:5]) + (", ..." if len(known) > 5 else "")
            raise PatientNotFound(f"patient {patient_id!r} does not appear in {traces} "
                                  f"(trace has {len(known)} patients: {listed})")
        print_patient(console, patient_id, records)
        if log.truncated:
            handler.show_warning("TRUNCATED_TRACE", str(traces))
            return EXIT_PARTIAL
        return EXIT_OK
    except (DxAgentsError, FileNotFoundError) as e:
        return handler.handle_exception(e, "inspect")


def check_ablation_configs(configs: Sequence[RunConfig]) -> None:
    """
    Require configurations that differ only along the ablation axes.

    Raises:
        ConfigError: Naming the first key that differs, or a shared trace path.
    """
    if len(configs) < 2:
        raise ConfigError("ablate", "at least two configurations are needed")

    def comparable(cfg: RunConfig) -> Dict[str, Any]:
        semantic = cfg.semantic_dict()
        semantic["dataset.manifest"] = str(cfg.resolve(cfg.manifest_path)) if cfg.manifest_path else ""
        return {k: v for k, v in semantic.items() if k.split("#", 1)[0] not in ABLATION_KEYS}

    reference = comparable(configs[0])
    for cfg in configs[1:]:
        other = comparable(cfg)
        for key in sorted(set(reference) | set(other)):
            if reference.get(key) != other.get(key):
                raise ConfigError(key.split("#", 1)[0], "differs between ablation configurations")
    trace_paths = [cfg.resolve(cfg.trace_path) for cfg in configs]
    if len(set(trace_paths)) != len(trace_paths):
        raise ConfigError("run.trace_path", "each ablation configuration needs its own trace path")


def cmd_ablate(configs: Sequence[str], console: Optional[Console] = None) -> int:
    console = console or _console()
    try:
        loaded = [load_config(path) for path in configs]
        check_ablation_configs(loaded)
        rows: List[ComparisonRow] = []
        worst = EXIT_OK
        for cfg in loaded:
            logger.info(f"Ablation run {cfg.ablation_key()} (config {cfg.fingerprint()})")
            code, report = execute_run(cfg, console)
            worst = max(worst, code)
            if report is not None:
                rows.append(ComparisonRow(cfg.negation_mode, cfg.use_cot, cfg.include_disease_graph, report))
        _print(console, emit_comparison(rows))
        return worst
    except (DxAgentsError, FileNotFoundError) as e:
        return ErrorHandler(console).handle_exception(e, "ablate")


def cmd_validate(config: str, overrides: Sequence[str] = (), console: Optional[Console] = None) -> int:
    """
    Check configuration, guidelines, manifest, templates and backend reachability.

    Nothing is generated: guidelines are parsed without an LLM, so a disease
    given only as prose is reported as an error.
    """
    console = console or _console()
    try:
        cfg = load_config(config, overrides)
        guidelines = load_guidelines(cfg.require("guidelines.path"))
        for name, override in ((SCREENING_TEMPLATE, cfg.screening_template),
                               (DIAGNOSIS_TEMPLATE, cfg.diagnosis_template),
                               (REFINEMENT_TEMPLATE, cfg.refinement_template)):
            cfg.files.read_template(name, override or None)
        conditions = guidelines.names
        if cfg.manifest_path:
            manifest = load_manifest(cfg.require("dataset.manifest"))
            conditions = condition_list_for(manifest.labels, guidelines)
            _print(console, f"manifest: {len(manifest.patients)} patients, labels {', '.join(manifest.labels)}")

        pipeline = DiagnosticPipeline.from_config(cfg, guidelines)
        pipeline.preflight()
        _print(console, f"guidelines: {len(guidelines.diseases)} diseases "
                        f"({sum(len(d.findings) for d in guidelines.diseases)} findings)")
        _print(console, f"conditions: {', '.join(conditions)}")
        _print(console, f"backends: {pipeline.llm.describe()} / {pipeline.scorer.backend.describe()}")
        _print(console, f"config {cfg.fingerprint()} ok")
        return EXIT_OK
    except (DxAgentsError, FileNotFoundError) as e:
        return ErrorHandler(console).handle_exception(e, "validate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dxagents",
        description="Zero-shot multi-agent diagnosis from image findings.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {APP_VERSION}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="diagnose every patient of the manifest")
    run.add_argument("--config", required=True)
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                     help="override a dotted configuration key")

    evaluate_cmd = commands.add_parser("eval", help="compute metrics from a trace")
    evaluate_cmd.add_argument("--traces", required=True)
    evaluate_cmd.add_argument("--tail", action="append", default=[], metavar="LABEL")
    evaluate_cmd.add_argument("--exclude", action="append", default=[], metavar="LABEL")
    evaluate_cmd.add_argument("--stage", choices=(STAGE_FINAL, STAGE_DIAGNOSIS))
    evaluate_cmd.add_argument("--format", dest="fmt", choices=("text", "json"), default="text")

    inspect = commands.add_parser("inspect", help="print one patient's agent transcript")
    inspect.add_argument("--traces", required=True)
    inspect.add_argument("--patient", required=True)

    ablate = commands.add_parser("ablate", help="run and compare ablation configurations")
    ablate.add_argument("--config", dest="configs", action="append", required=True)

    validate = commands.add_parser("validate", help="preflight a configuration without running")
    validate.add_argument("--config", required=True)
    validate.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    return parser


def main(argv: Optional[Sequence[str]] = None, console: Optional[Console] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)

    if args.command == "run":
        return cmd_run(args.config, args.overrides, console)
    if args.command == "eval":
        return cmd_eval(args.traces, args.tail, args.exclude, args.stage,
                        JSON if args.fmt == "json" else TEXT_TABLE, console)
    if args.command == "inspect":
        return cmd_inspect(args.traces, args.patient, console)
    if args.command == "ablate":
        return cmd_ablate(args.configs, console)
    return cmd_validate(args.config, args.overrides, console)
