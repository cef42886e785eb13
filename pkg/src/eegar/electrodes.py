"""Canonical 138-name electrode list, loaded from the packaged resource."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

VOCAB_VERSION = 1
VOCAB_SIZE = 138


class VocabularyError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "vocabulary error"


@lru_cache(maxsize=None)
def canonical_names() -> tuple[str, ...]:
    text = resources.files("eegar.resources").joinpath(f"electrodes_v{VOCAB_VERSION}.txt").read_text("utf-8")
    names = tuple(line.strip() for line in text.splitlines() if line.strip())
    if len(names) != VOCAB_SIZE or len(set(names)) != VOCAB_SIZE:
        raise RuntimeError(f"corrupt electrode resource: {len(names)} names")
    return names


@lru_cache(maxsize=None)
def _lookup() -> dict[str, int]:
    return {name.upper(): i for i, name in enumerate(canonical_names())}


def electrode_index(name: str) -> int:
    """Case-insensitive index of ``name`` in canonical order."""
    try:
        return _lookup()[name.strip().upper()]
    except KeyError:
        raise VocabularyError(f"unknown electrode {name!r}") from None


def canonical(name: str) -> str:
    return canonical_names()[electrode_index(name)]


def validate_names(names) -> tuple[str, ...]:
    """Canonicalise ``names``; reject unknown or duplicate electrodes."""
    out = tuple(canonical(n) for n in names)
    if len(set(out)) != len(out):
        dupes = sorted({n for n in out if out.count(n) > 1})
        raise VocabularyError(f"duplicate electrodes {dupes}")
    return out
