"""
File handling functionality for DxAgents.

This module provides UTF-8 file access relative to a base directory
(normally the directory of the run configuration) and lookup of the
bundled prompt templates.
"""

from pathlib import Path
from typing import Optional, Union

from .constants import TEMPLATES_DIR

PathLike = Union[str, Path]

UTF8_BOM = b"\xef\xbb\xbf"


class FileHandler:
    """Handles file reads and path resolution for a run."""

    def __init__(self, base_path: Optional[PathLike] = None):
        """
        Initialize FileHandler with base path.

        Args:
            base_path: Directory relative paths are resolved against. If None,
                the current working directory is used.
        """
        if base_path is None:
            self.base_path = Path.cwd()
        else:
            self.base_path = Path(base_path).resolve()

    def resolve(self, path: PathLike) -> Path:
        """Resolve a path against the base directory unless it is absolute."""
        candidate = Path(path).expanduser()
        if candidate.is_absolute():
            return candidate
        return (self.base_path / candidate).resolve()

    def read_bytes(self, path: PathLike) -> bytes:
        """
        Read a file's raw bytes.

        Raises:
            FileNotFoundError: If the file does not exist.
        """
        resolved = self.resolve(path)
        if not resolved.is_file():
            raise FileNotFoundError(f"No such file: {resolved}")
        return resolved.read_bytes()

    def read_text(self, path: PathLike) -> str:
        """
        Read a UTF-8 text file strictly.

        A leading byte-order mark is stripped here; callers that must reject
        it (the guideline loader) use read_bytes instead.

        Args:
            path: File path, absolute or relative to the base directory.

        Returns:
            Decoded file content.
        """
        data = self.read_bytes(path)
        if data.startswith(UTF8_BOM):
            data = data[len(UTF8_BOM):]
        return data.decode("utf-8")

    def template_path(self, name: str, override: Optional[PathLike] = None) -> Path:
        """The user template when one is given, else the bundled template called name."""
        if override:
            return self.resolve(override)
        return TEMPLATES_DIR / name

    def read_template(self, name: str, override: Optional[PathLike] = None) -> str:
        """
        Read a prompt template.

        Args:
            name: Bundled template file name.
            override: Optional user template path replacing the bundled one.

        Returns:
            Template text with the trailing newline removed.
        """
        return self.read_text(self.template_path(name, override)).rstrip("\n")
