"""Prompt templates shipped as editable text files."""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Optional

NAMES = ("executor", "curriculum", "judge")


def load_prompt(name: str, override: Optional[str] = None) -> str:
    """Template text by name; ``override`` is a path to a replacement file."""
    if override:
        return Path(override).read_text(encoding="utf-8")
    if name not in NAMES:
        raise KeyError(f"unknown prompt {name!r}")
    return resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8")


def executor_context(problem: str, template: Optional[str] = None) -> str:
    # str.format would trip over the braces in \boxed{}
    return (template or load_prompt("executor")).replace("{problem}", problem)
