"""Worker threads for DxAgents."""

from .thread_manager import ThreadManager

__all__ = ['ThreadManager']
