"""Discourse-cue pool, surface variants, cue occurrences and sentence boundaries.

Matching works on the detokenized text of a trace, so a cue set calibrated on one
tokenizer transfers to any other. A match needs a non-alphanumeric character (or
the text edge) on both sides; variants that already end in punctuation or a space
carry their own right boundary.
"""
from __future__ import annotations

import logging
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple

from .errors import BadCue, BadPosition, ConfigError
from .records import Trace

logger = logging.getLogger(__name__)

SENTENCE_TERMINATORS: Tuple[str, ...] = ('.', '!', '?', '\n')
_WORD_CHAR = re.compile(r'[^\W_]')


class CueCategory(str, Enum):
    PROGRESSION = 'Progression'
    RECONSIDERATION = 'Reconsideration'
    INFERENCE = 'Inference'
    CONSOLIDATION = 'Consolidation'
    REFERENCE = 'Reference'
    ACKNOWLEDGEMENT = 'Acknowledgement'

    @classmethod
    def parse(cls, name: str) -> 'CueCategory':
        for member in cls:
            if member.value.lower() == str(name).strip().lower():
                return member
        raise BadCue(f"unknown cue category: {name!r}")


# Listed in category order; a canonical repeated in a later category keeps its first one.
DEFAULT_CUES: Dict[CueCategory, Tuple[str, ...]] = {
    CueCategory.PROGRESSION: ('now', 'then', 'next', 'again'),
    CueCategory.RECONSIDERATION: ('wait', 'however', 'alternatively', 'but', 'maybe', 'hmm', 'oh'),
    CueCategory.INFERENCE: ('thus', 'hence', 'therefore', 'similarly', 'specifically'),
    CueCategory.CONSOLIDATION: ('so', 'therefore', 'check', 'double-check', 'verify'),
    CueCategory.REFERENCE: ('another', 'other', 'any'),
    CueCategory.ACKNOWLEDGEMENT: ('ah',),
}


@dataclass(frozen=True)
class CueEntry:
    canonical: str
    category: CueCategory
    variants: FrozenSet[str]


@dataclass(frozen=True)
class CueOccurrence:
    cue_canonical: str
    token_position: int
    matched_surface: str


def _validate_canonical(canonical: str) -> None:
    if not canonical:
        raise BadCue('cue canonical form is empty')
    if canonical != canonical.strip() or canonical != canonical.lower():
        raise BadCue(f"cue canonical form must be lowercase without outer whitespace: {canonical!r}")


def expand_variants(canonical: str) -> FrozenSet[str]:
    _validate_canonical(canonical)
    capitalized = canonical[0].upper() + canonical[1:]
    surfaces = set()
    for form in (canonical, capitalized):
        surfaces.update((form, form + ',', form + ' '))
    return frozenset(surfaces)


def make_entry(canonical: str, category: CueCategory, extra_variants: Iterable[str] = ()) -> CueEntry:
    variants = set(expand_variants(canonical))
    for extra in extra_variants:
        if not extra:
            raise BadCue(f"empty extra variant for {canonical!r}")
        variants.add(extra)
    return CueEntry(canonical=canonical, category=category, variants=frozenset(variants))


@dataclass(frozen=True)
class CuePool:
    entries: Tuple[CueEntry, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, 'entries', tuple(self.entries))
        seen = set()
        for entry in self.entries:
            if entry.canonical in seen:
                raise BadCue(f"duplicate canonical in pool: {entry.canonical!r}")
            seen.add(entry.canonical)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, canonical: object) -> bool:
        return canonical in self._by_canonical

    @cached_property
    def _by_canonical(self) -> Dict[str, CueEntry]:
        return {entry.canonical: entry for entry in self.entries}

    @cached_property
    def _surface_owner(self) -> Dict[str, str]:
        owner: Dict[str, str] = {}
        for entry in self.entries:
            for surface in entry.variants:
                # an extra variant shared by two cues goes to the first one listed
                owner.setdefault(surface, entry.canonical)
        return owner

    @cached_property
    def _matcher(self) -> Optional['re.Pattern[str]']:
        surfaces = sorted(self._surface_owner, key=lambda s: (-len(s), s))
        if not surfaces:
            return None
        alternatives = []
        for surface in surfaces:
            piece = re.escape(surface)
            if surface[-1].isalnum():
                piece += r'(?![^\W_])'
            alternatives.append(piece)
        return re.compile(r'(?<![^\W_])(?:' + '|'.join(alternatives) + ')')

    def get(self, canonical: str) -> CueEntry:
        try:
            return self._by_canonical[canonical]
        except KeyError:
            raise BadCue(f"cue not in pool: {canonical!r}") from None

    @property
    def canonicals(self) -> List[str]:
        return [entry.canonical for entry in self.entries]

    def surfaces(self) -> FrozenSet[str]:
        return frozenset(self._surface_owner)

    def owner_of(self, surface: str) -> str:
        return self._surface_owner[surface]


def default_pool() -> CuePool:
    entries = []
    seen = set()
    for category, canonicals in DEFAULT_CUES.items():
        for canonical in canonicals:
            if canonical in seen:
                continue
            seen.add(canonical)
            entries.append(make_entry(canonical, category))
    return CuePool(entries=tuple(entries))


def load_pool(path: Path) -> CuePool:
    """Read a ``[[cue]]`` TOML pool override."""
    try:
        with open(path, 'rb') as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid cue pool file {path}: {exc}") from exc
    cues = data.get('cue')
    if not isinstance(cues, list) or not cues:
        raise ConfigError(f"cue pool file {path} has no [[cue]] tables")
    entries = []
    for table in cues:
        if 'canonical' not in table or 'category' not in table:
            raise ConfigError(f"[[cue]] entry missing canonical/category: {table!r}")
        entries.append(
            make_entry(
                str(table['canonical']),
                CueCategory.parse(table['category']),
                [str(v) for v in table.get('extra_variants', [])],
            )
        )
    pool = CuePool(entries=tuple(entries))
    logger.info(f"Loaded cue pool with {len(pool)} canonicals from {path}")
    return pool


def find_occurrences(trace: Trace, pool: CuePool) -> List[CueOccurrence]:
    matcher = pool._matcher
    if matcher is None or not trace.tokens:
        return []
    occurrences = []
    for match in matcher.finditer(trace.text):
        surface = match.group(0)
        occurrences.append(
            CueOccurrence(
                cue_canonical=pool.owner_of(surface),
                token_position=trace.token_at_char(match.start()),
                matched_surface=surface,
            )
        )
    return occurrences


def _is_terminator(text: str, i: int) -> bool:
    ch = text[i]
    if ch not in SENTENCE_TERMINATORS:
        return False
    # '.' between two digits is a decimal point
    if ch == '.' and 0 < i < len(text) - 1 and text[i - 1].isdigit() and text[i + 1].isdigit():
        return False
    return True


def sentence_terminator_positions(text: str) -> List[int]:
    """Character indices of sentence terminators in ``text``."""
    return [i for i in range(len(text)) if _is_terminator(text, i)]


def next_sentence_end(trace: Trace, from_position: int) -> int:
    if from_position < 0 or from_position >= len(trace):
        raise BadPosition(f"position {from_position} outside trace of length {len(trace)}")
    text = trace.text
    for i in range(trace.offsets[from_position], len(text)):
        if _is_terminator(text, i):
            return max(from_position, trace.token_at_char(i))
    return len(trace)


def at_word_boundary(text: str, start: int, end: int) -> bool:
    """Whether ``text[start:end]`` stands on its own the way pool matches do."""
    if start > 0 and _WORD_CHAR.match(text[start - 1]):
        return False
    if end < len(text) and _WORD_CHAR.match(text[end - 1]) and _WORD_CHAR.match(text[end]):
        return False
    return True
