"""Command-line interface for DxAgents."""

from .commands import build_parser, cmd_ablate, cmd_eval, cmd_inspect, cmd_run, cmd_validate, main
from .error_handler import EXIT_FATAL, EXIT_OK, EXIT_PARTIAL, ErrorHandler

__all__ = [
    'build_parser',
    'cmd_ablate',
    'cmd_eval',
    'cmd_inspect',
    'cmd_run',
    'cmd_validate',
    'main',
    'EXIT_FATAL',
    'EXIT_OK',
    'EXIT_PARTIAL',
    'ErrorHandler',
]
