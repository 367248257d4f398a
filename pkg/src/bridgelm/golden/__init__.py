"""Frozen prompt and template texts shipped with the package."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources


def normalize(text: str) -> str:
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    return text[:-1] if text.endswith("\n") else text


@lru_cache(maxsize=None)
def load_text(name: str) -> str:
    """Return a golden file's content with newlines normalized and one trailing newline dropped."""
    return normalize(resources.files(__name__).joinpath(name).read_text(encoding="utf-8"))


def load_lines(name: str) -> list[str]:
    return [line for line in load_text(name).split("\n") if line.strip()]
