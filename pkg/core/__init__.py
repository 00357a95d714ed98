"""
Core module for DxAgents.

This module contains the three diagnosis agents (screening, diagnosis,
refinement), their LLM and embedding backends, the patient pipeline and
the evaluation of its results.
"""

from .constants import APP_VERSION
from .config import RunConfig, load_config
from .guidelines import Disease, Finding, GuidelineSet, load_guidelines
from .llm_client import ChatCompletionsClient, ScriptedMockBackend, build_llm_backend
from .embedding_client import ProbeScorer, SyntheticEmbeddingBackend, RemoteEmbeddingClient
from .screening import ScreeningAgent, parse_tool_call, run_screening
from .diagnosis import DiagnosisAgent, parse_answer, run_diagnosis
from .refinement import RefinementAgent, RefinementConfig, run_refinement, select_single_label
from .pipeline import DiagnosticPipeline, PatientRecord, PatientResult, load_manifest
from .evaluation import MetricReport, emit_report, evaluate

__all__ = [
    'APP_VERSION',
    'RunConfig',
    'load_config',
    'Disease',
    'Finding',
    'GuidelineSet',
    'load_guidelines',
    'ChatCompletionsClient',
    'ScriptedMockBackend',
    'build_llm_backend',
    'ProbeScorer',
    'SyntheticEmbeddingBackend',
    'RemoteEmbeddingClient',
    'ScreeningAgent',
    'parse_tool_call',
    'run_screening',
    'DiagnosisAgent',
    'parse_answer',
    'run_diagnosis',
    'RefinementAgent',
    'RefinementConfig',
    'run_refinement',
    'select_single_label',
    'DiagnosticPipeline',
    'PatientRecord',
    'PatientResult',
    'load_manifest',
    'MetricReport',
    'emit_report',
    'evaluate',
]
