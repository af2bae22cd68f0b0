"""Hierarchical prompt catalog: loading, ranking and per-iteration pruning.

Action indices are positions in the catalog as loaded from disk. A pruned
catalog keeps the original indices of its surviving prompts so that the
policy network's output layer never changes shape.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

Embedder = Callable[[str], np.ndarray]


class CatalogError(Exception):
    """Base class for prompt catalog load failures."""


class CatalogMissingError(CatalogError):
    pass


class CatalogFormatError(CatalogError):
    pass


class DuplicatePromptError(CatalogError):
    def __init__(self, prompt_id: str):
        super().__init__(f"duplicate prompt id {prompt_id!r}")
        self.prompt_id = prompt_id


class EmptyCatalogError(CatalogError):
    def __init__(self, where: str = ""):
        super().__init__(f"empty catalog{': ' + where if where else ''}")


@dataclass(frozen=True)
class PromptEntry:
    id: str
    level: int
    text: str


@dataclass(frozen=True)
class PromptCatalog:
    entries: tuple[PromptEntry, ...]
    actions: tuple[int, ...]

    def __post_init__(self):
        if len(self.entries) != len(self.actions):
            raise ValueError("entries and actions differ in length")
        if list(self.actions) != sorted(set(self.actions)):
            raise ValueError("action indices must be unique and ascending")

    @classmethod
    def from_entries(cls, entries: Sequence[PromptEntry]) -> "PromptCatalog":
        seen = set()
        for e in entries:
            if e.id in seen:
                raise DuplicatePromptError(e.id)
            seen.add(e.id)
        return cls(tuple(entries), tuple(range(len(entries))))

    def __len__(self) -> int:
        return len(self.entries)

    def entry(self, action: int) -> PromptEntry:
        try:
            return self.entries[self.actions.index(action)]
        except ValueError:
            raise KeyError(f"action {action} not in catalog") from None

    def level_ranges(self) -> dict[int, tuple[int, int]]:
        """Inclusive (first, last) action index per hierarchy level."""
        ranges: dict[int, tuple[int, int]] = {}
        for action, e in zip(self.actions, self.entries):
            lo, hi = ranges.get(e.level, (action, action))
            ranges[e.level] = (min(lo, action), max(hi, action))
        return ranges

    def mean_embedding(self, embedder: Embedder) -> np.ndarray:
        return np.mean([embedder(e.text) for e in self.entries], axis=0)


@dataclass(frozen=True)
class RankedPrompt:
    action: int
    score: float


def load_catalog(path: str | Path) -> PromptCatalog:
    """Read a JSONL catalog with one ``{"id", "level", "text"}`` object per line."""
    path = Path(path)
    if not path.is_file():
        raise CatalogMissingError(f"prompt catalog not found: {path}")
    entries = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                entry = PromptEntry(str(obj["id"]), int(obj["level"]), str(obj["text"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CatalogFormatError(f"{path}:{lineno}: malformed prompt line ({exc})") from exc
            if not entry.text.strip():
                raise CatalogFormatError(f"{path}:{lineno}: prompt text is empty")
            if not 1 <= entry.level <= 3:
                raise CatalogFormatError(f"{path}:{lineno}: level {entry.level} outside 1..3")
            entries.append(entry)
    if not entries:
        raise EmptyCatalogError(str(path))
    return PromptCatalog.from_entries(entries)


def rank_prompts(
    text_embedding: np.ndarray, catalog: PromptCatalog, embedder: Embedder
) -> list[RankedPrompt]:
    """Cosine score of every prompt against the text, best first.

    Equal scores are ordered by ascending action index.
    """
    if not len(catalog):
        raise EmptyCatalogError()
    q = np.asarray(text_embedding, dtype=float)
    q = q / np.linalg.norm(q)
    ranked = []
    for action, entry in zip(catalog.actions, catalog.entries):
        p = np.asarray(embedder(entry.text), dtype=float)
        score = float(np.clip(q @ (p / np.linalg.norm(p)), -1.0, 1.0))
        ranked.append(RankedPrompt(action, score))
    ranked.sort(key=lambda rp: (-rp.score, rp.action))
    return ranked


def default_retention(n: int, floor: int = 3) -> int:
    """Keep half the prompts (rounded up) but never fewer than ``floor``."""
    return min(n, max(floor, math.ceil(n / 2)))


def update_prompt_list(
    catalog: PromptCatalog, ranked: Sequence[RankedPrompt], k: int
) -> PromptCatalog:
    """Sub-catalog of the top-``k`` ranked prompts, in their original order."""
    if not 1 <= k <= len(ranked):
        raise ValueError(f"retention k={k} outside [1, {len(ranked)}]")
    keep = {rp.action for rp in ranked[:k]}
    pairs = [(a, e) for a, e in zip(catalog.actions, catalog.entries) if a in keep]
    if len(pairs) != k:
        raise ValueError("ranking refers to actions missing from the catalog")
    return PromptCatalog(tuple(e for _, e in pairs), tuple(a for a, _ in pairs))
