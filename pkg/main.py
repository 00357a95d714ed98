#!/usr/bin/env python3
"""
Entry point for DxAgents.

Usage:
    python main.py run --config resources/synthetic_world/config.toml
    python main.py eval --traces traces/run.jsonl
    python main.py inspect --traces traces/run.jsonl --patient p01
    python main.py ablate --config a.toml --config b.toml
    python main.py validate --config resources/synthetic_world/config.toml

License: MIT
"""

import sys
from pathlib import Path

# Add the current directory to Python path for imports
sys.path.insert(0, str(Path(__file__).parent))


def main() -> int:
    """Main entry point for the application."""
    from cli import main as cli_main

    return cli_main()


if __name__ == "__main__":
    sys.exit(main())
