"""Prompt templates shipped as package data.

Templates use ``string.Template`` placeholders (``$name``) so JSON braces in
the text need no escaping. Every template starts with a ``TASK:`` marker line
that the mock client keys on.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from string import Template

PROMPT_VERSION = "1"


@lru_cache(maxsize=None)
def load(name: str) -> Template:
    try:
        text = resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise KeyError(f"unknown prompt template {name!r}") from exc
    return Template(text)


def render(name: str, **fields) -> str:
    """Fill template ``name``; missing placeholders raise KeyError."""
    return load(name).substitute({k: str(v) for k, v in fields.items()})
