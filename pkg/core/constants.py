"""
Constants for DxAgents.

This module defines the reserved protocol tokens, prompt placeholders,
bundled resource locations and run defaults shared by the agents.
"""

from pathlib import Path
from typing import Tuple

# Application version
APP_VERSION = "v1.0"

# Bundled resources (templates, synthetic oracle world)
RESOURCES_DIR: Path = Path(__file__).resolve().parent.parent / "resources"
TEMPLATES_DIR: Path = RESOURCES_DIR / "templates"
SYNTHETIC_WORLD_DIR: Path = RESOURCES_DIR / "synthetic_world"

SCREENING_TEMPLATE = "screening.txt"
DIAGNOSIS_TEMPLATE = "diagnosis.txt"
REFINEMENT_TEMPLATE = "refinement.txt"
EXTRACTION_TEMPLATE = "extract_findings.txt"

# Tool-call protocol
TOOL_CALL_KEYWORD = "CLIP:"
TOOL_CALL_SEPARATOR = "/"
TOOL_CALL_ARROW = "->"
RESERVED_TOKENS: Tuple[str, ...] = (TOOL_CALL_KEYWORD, TOOL_CALL_SEPARATOR, TOOL_CALL_ARROW)
MALFORMED_CALL_NOTICE = "-> Error: malformed call, continue.\n"

# Template placeholders
CONDITION_PLACEHOLDER = "<condition>"
FINDINGS_BLOCK_PLACEHOLDER = "<xplainer_findings>"
OBSERVATIONS_PLACEHOLDER = "<findings>"
CONDITION_LIST_PLACEHOLDER = "<condition_list>"
DIAGNOSES_PLACEHOLDER = "<diagnoses>"
PROSE_PLACEHOLDER = "<prose>"

# Answer protocol
ANSWER_YES = "Therefore, my answer is: yes."
ANSWER_NO = "Therefore, my answer is: no."
ANSWER_REMINDER = (
    f'Please end your reply with one of these exact sentences: "{ANSWER_YES}" or "{ANSWER_NO}"'
)
CONTINUE_PROMPT = "Continue."

# Run defaults
DEFAULT_PSI = 0.55
DEFAULT_TEMPERATURE = 0.8
DEFAULT_MAX_RETRIES = 3
DEFAULT_MAX_TOKENS = 512
DEFAULT_TOKEN_BUDGET = 4096
DEFAULT_CACHE_SIZE = 4096
DEFAULT_TOKEN_ENV = "DXAGENTS_LLM_TOKEN"
DEFAULT_TIMEOUT = 60.0
BACKOFF_BASE_SECONDS = 0.5
MAX_STOP_SEQUENCES = 16
MOCK_HISTORY_LIMIT = 256
