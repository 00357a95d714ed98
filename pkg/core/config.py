"""
Run configuration for DxAgents.

A run is described by a TOML document whose sections mirror the agents
(screening, diagnosis, refinement) and the run plumbing. Every setting is
addressable by a dotted key such as "screening.psi", which is also how
command-line overrides name it.
"""

import dataclasses
import difflib
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

from .constants import (
    APP_VERSION,
    DEFAULT_CACHE_SIZE,
    DEFAULT_MAX_RETRIES,
    DEFAULT_MAX_TOKENS,
    DEFAULT_PSI,
    DEFAULT_TEMPERATURE,
    DEFAULT_TIMEOUT,
    DEFAULT_TOKEN_BUDGET,
    DEFAULT_TOKEN_ENV,
    DIAGNOSIS_TEMPLATE,
    EXTRACTION_TEMPLATE,
    REFINEMENT_TEMPLATE,
    SCREENING_TEMPLATE,
)
from .errors import ConfigError
from .file_handler import FileHandler
from .utils import canonical_json, file_digest, sha256_hex

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MULTI_LABEL = "multi_label"
SINGLE_LABEL = "single_label"

_CHOICES: Dict[str, Tuple[str, ...]] = {
    "screening.clip_mode": ("contrastive", "positive_only"),
    "screening.negation_mode": ("llm", "naive"),
    "run.task_mode": (MULTI_LABEL, SINGLE_LABEL),
    "llm.backend": ("mock", "remote"),
    "embedding.backend": ("synthetic", "remote"),
    "evaluation.stage": ("final", "diagnosis"),
}

# Keys that may differ between configurations compared by an ablation.
ABLATION_KEYS = frozenset({
    "screening.negation_mode",
    "refinement.use_cot",
    "refinement.include_disease_graph",
    "refinement.graph_path",
    "run.trace_path",
    "evaluation.report_path",
})

# Keys with no effect on agent outputs; excluded from the fingerprint.
_OPERATIONAL_KEYS = frozenset({
    "run.parallelism",
    "run.trace_path",
    "run.resume",
    "llm.timeout",
    "llm.token_env",
    "embedding.timeout",
    "embedding.cache_size",
    "dataset.manifest",
    "evaluation.tail_labels",
    "evaluation.exclude_labels",
    "evaluation.stage",
    "evaluation.report_path",
})

# Path-valued keys whose file contents feed the fingerprint.
_DIGEST_KEYS = (
    "guidelines.path",
    "refinement.graph_path",
    "llm.script",
    "embedding.world",
)

# Template keys and the bundled template each one overrides.
_TEMPLATE_KEYS: Dict[str, str] = {
    "screening.template": SCREENING_TEMPLATE,
    "diagnosis.template": DIAGNOSIS_TEMPLATE,
    "refinement.template": REFINEMENT_TEMPLATE,
}


def _key(dotted: str) -> Dict[str, str]:
    return {"key": dotted}


@dataclass(frozen=True)
class RunConfig:
    """All knobs of a run. Field metadata carries the dotted configuration key."""

    guidelines_path: str = field(default="", metadata=_key("guidelines.path"))
    manifest_path: str = field(default="", metadata=_key("dataset.manifest"))

    psi: float = field(default=DEFAULT_PSI, metadata=_key("screening.psi"))
    clip_mode: str = field(default="contrastive", metadata=_key("screening.clip_mode"))
    negation_mode: str = field(default="llm", metadata=_key("screening.negation_mode"))
    max_tool_calls: int = field(default=0, metadata=_key("screening.max_tool_calls"))
    screening_token_budget: int = field(default=DEFAULT_TOKEN_BUDGET, metadata=_key("screening.token_budget"))
    screening_max_tokens: int = field(default=DEFAULT_MAX_TOKENS, metadata=_key("screening.max_tokens"))
    screening_template: str = field(default="", metadata=_key("screening.template"))

    diagnosis_max_tokens: int = field(default=DEFAULT_MAX_TOKENS, metadata=_key("diagnosis.max_tokens"))
    diagnosis_template: str = field(default="", metadata=_key("diagnosis.template"))

    use_cot: bool = field(default=True, metadata=_key("refinement.use_cot"))
    include_disease_graph: bool = field(default=False, metadata=_key("refinement.include_disease_graph"))
    graph_path: str = field(default="", metadata=_key("refinement.graph_path"))
    refinement_max_tokens: int = field(default=DEFAULT_MAX_TOKENS, metadata=_key("refinement.max_tokens"))
    refinement_template: str = field(default="", metadata=_key("refinement.template"))

    task_mode: str = field(default=MULTI_LABEL, metadata=_key("run.task_mode"))
    temperature: float = field(default=DEFAULT_TEMPERATURE, metadata=_key("run.temperature"))
    max_retries: int = field(default=DEFAULT_MAX_RETRIES, metadata=_key("run.max_retries"))
    parallelism: int = field(default=1, metadata=_key("run.parallelism"))
    trace_path: str = field(default="traces/run.jsonl", metadata=_key("run.trace_path"))
    resume: bool = field(default=False, metadata=_key("run.resume"))

    llm_backend: str = field(default="mock", metadata=_key("llm.backend"))
    llm_script: str = field(default="", metadata=_key("llm.script"))
    llm_base_url: str = field(default="", metadata=_key("llm.base_url"))
    llm_model: str = field(default="", metadata=_key("llm.model"))
    llm_timeout: float = field(default=DEFAULT_TIMEOUT, metadata=_key("llm.timeout"))
    llm_assistant_prefill: bool = field(default=False, metadata=_key("llm.assistant_prefill"))
    llm_token_env: str = field(default=DEFAULT_TOKEN_ENV, metadata=_key("llm.token_env"))

    embedding_backend: str = field(default="synthetic", metadata=_key("embedding.backend"))
    embedding_world: str = field(default="", metadata=_key("embedding.world"))
    embedding_base_url: str = field(default="", metadata=_key("embedding.base_url"))
    embedding_dimension: int = field(default=0, metadata=_key("embedding.dimension"))
    embedding_timeout: float = field(default=DEFAULT_TIMEOUT, metadata=_key("embedding.timeout"))
    embedding_cache_size: int = field(default=DEFAULT_CACHE_SIZE, metadata=_key("embedding.cache_size"))

    tail_labels: Tuple[str, ...] = field(default=(), metadata=_key("evaluation.tail_labels"))
    exclude_labels: Tuple[str, ...] = field(default=(), metadata=_key("evaluation.exclude_labels"))
    evaluation_stage: str = field(default="final", metadata=_key("evaluation.stage"))
    report_path: str = field(default="", metadata=_key("evaluation.report_path"))

    base_dir: str = field(default=".", metadata={}, compare=False)

    def __post_init__(self) -> None:
        for dotted, choices in _CHOICES.items():
            value = getattr(self, _FIELD_BY_KEY[dotted])
            if value not in choices:
                raise ConfigError(dotted, f"{value!r} is not one of {', '.join(choices)}")
        if not 0.0 < self.psi < 1.0:
            raise ConfigError("screening.psi", f"{self.psi} is outside (0, 1)")
        if not 0.0 <= self.temperature <= 2.0:
            raise ConfigError("run.temperature", f"{self.temperature} is outside [0, 2]")
        if self.max_retries < 1:
            raise ConfigError("run.max_retries", "must be at least 1")
        if self.parallelism < 1:
            raise ConfigError("run.parallelism", "must be at least 1")
        if self.max_tool_calls < 0:
            raise ConfigError("screening.max_tool_calls", "must be >= 0 (0 means twice the finding count)")
        for dotted in ("screening.max_tokens", "diagnosis.max_tokens", "refinement.max_tokens",
                       "screening.token_budget"):
            if getattr(self, _FIELD_BY_KEY[dotted]) <= 0:
                raise ConfigError(dotted, "must be positive")
        if self.include_disease_graph and not self.graph_path:
            raise ConfigError("refinement.graph_path", "required when include_disease_graph is true")

    # -- paths ---------------------------------------------------------------

    @property
    def files(self) -> FileHandler:
        return FileHandler(self.base_dir)

    def resolve(self, path: PathLike) -> Path:
        return self.files.resolve(path)

    def require(self, dotted: str) -> Path:
        """Resolve a required path setting, raising ConfigError naming its key if unset."""
        value = getattr(self, _FIELD_BY_KEY[dotted])
        if not value:
            raise ConfigError(dotted, "is required")
        return self.resolve(value)

    @property
    def metrics_path(self) -> Path:
        if self.report_path:
            return self.resolve(self.report_path)
        trace = self.resolve(self.trace_path)
        return trace.with_name(trace.stem + ".metrics.json")

    # -- derived views -------------------------------------------------------

    @property
    def single_label(self) -> bool:
        return self.task_mode == SINGLE_LABEL

    def as_dotted(self) -> Dict[str, Any]:
        values = {}
        for f in dataclasses.fields(self):
            if "key" in f.metadata:
                value = getattr(self, f.name)
                values[f.metadata["key"]] = list(value) if isinstance(value, tuple) else value
        return values

    def semantic_dict(self) -> Dict[str, Any]:
        """
        Settings that influence agent outputs, with content digests of referenced files.

        Prompt templates are digested whether they are user overrides or the
        bundled ones, and the application version is included.
        """
        semantic = {k: v for k, v in self.as_dotted().items() if k not in _OPERATIONAL_KEYS}
        for dotted in _DIGEST_KEYS:
            value = semantic.get(dotted)
            semantic[f"{dotted}#sha256"] = file_digest(self.resolve(value)) if value else ""
        files = self.files
        for dotted, bundled in _TEMPLATE_KEYS.items():
            semantic[f"{dotted}#sha256"] = file_digest(files.template_path(bundled, semantic.get(dotted)))
        semantic["guidelines.extraction_template#sha256"] = file_digest(files.template_path(EXTRACTION_TEMPLATE))
        semantic["app_version"] = APP_VERSION
        return semantic

    def fingerprint(self) -> str:
        return sha256_hex(canonical_json(self.semantic_dict()).encode("utf-8"))[:12]

    def ablation_key(self) -> Tuple[str, bool, bool]:
        return (self.negation_mode, self.use_cot, self.include_disease_graph)

    def with_overrides(self, overrides: Dict[str, Any]) -> "RunConfig":
        changes = {}
        for dotted, value in overrides.items():
            if dotted not in _FIELD_BY_KEY:
                close = difflib.get_close_matches(dotted, known_keys(), n=1)
                hint = f" (did you mean {close[0]}?)" if close else ""
                raise ConfigError(dotted, f"unknown configuration key{hint}")
            changes[_FIELD_BY_KEY[dotted]] = _coerce(dotted, value)
        return dataclasses.replace(self, **changes)


_FIELD_BY_KEY: Dict[str, str] = {
    f.metadata["key"]: f.name for f in dataclasses.fields(RunConfig) if "key" in f.metadata
}
_TYPES: Dict[str, Any] = {
    f.metadata["key"]: f.type for f in dataclasses.fields(RunConfig) if "key" in f.metadata
}


def known_keys() -> List[str]:
    return sorted(_FIELD_BY_KEY)


def _coerce(dotted: str, value: Any) -> Any:
    expected = _TYPES[dotted]
    if expected in (bool, "bool"):
        if isinstance(value, bool):
            return value
        raise ConfigError(dotted, f"expected true or false, got {value!r}")
    if expected in (int, "int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(dotted, f"expected an integer, got {value!r}")
        return value
    if expected in (float, "float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(dotted, f"expected a number, got {value!r}")
        return float(value)
    if expected in (str, "str"):
        if not isinstance(value, str):
            raise ConfigError(dotted, f"expected a string, got {value!r}")
        return value
    # Tuple[str, ...]
    if isinstance(value, str):
        value = [value]
    if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
        raise ConfigError(dotted, f"expected a list of strings, got {value!r}")
    return tuple(value)


def _flatten(document: Dict[str, Any]) -> Dict[str, Any]:
    flat = {}
    for section, body in document.items():
        if not isinstance(body, dict):
            raise ConfigError(section, "top-level entries must be sections")
        for name, value in body.items():
            flat[f"{section}.{name}"] = value
    return flat


def parse_override(assignment: str) -> Tuple[str, Any]:
    """
    Parse a "dotted.key=value" override.

    The value is read as a TOML scalar or array; anything TOML rejects is
    taken as a raw string.
    """
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like key=value")
    dotted, raw = assignment.split("=", 1)
    dotted = dotted.strip()
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return dotted, value


def config_from_mapping(values: Dict[str, Any], base_dir: PathLike = ".") -> RunConfig:
    """Build a RunConfig from dotted keys; unknown keys are rejected."""
    config = RunConfig(base_dir=str(Path(base_dir).resolve()))
    return config.with_overrides(values)


def load_config(path: PathLike, overrides: Iterable[str] = ()) -> RunConfig:
    """
    Load a TOML run configuration and apply dotted overrides.

    Args:
        path: Configuration file; relative paths inside resolve against its directory.
        overrides: "key=value" strings applied after the file.

    Returns:
        Validated RunConfig.

    Raises:
        FileNotFoundError: If the file does not exist.
        ConfigError: On syntax errors, unknown keys or invalid values.
    """
    config_path = Path(path).resolve()
    if not config_path.is_file():
        raise FileNotFoundError(f"No such config file: {config_path}")
    try:
        document = tomllib.loads(config_path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(str(config_path), f"invalid TOML: {e}")

    values = _flatten(document)
    for assignment in overrides:
        dotted, value = parse_override(assignment)
        values[dotted] = value
    config = config_from_mapping(values, base_dir=config_path.parent)
    logger.debug(f"Loaded config {config_path} (fingerprint {config.fingerprint()})")
    return config
