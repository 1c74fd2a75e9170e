"""Bundled mechanism corpus used by the test suite and CLI examples."""

from __future__ import annotations

from pathlib import Path

CORPUS_DIR = Path(__file__).parent


def corpus_files() -> list[Path]:
    return sorted(CORPUS_DIR.glob("*.mod"))


def corpus_path(name: str) -> Path:
    path = CORPUS_DIR / name
    if not path.exists():
        raise FileNotFoundError(f"no corpus file named {name!r}")
    return path
