"""Token records, traces and the JSONL trace format.

One JSONL line per token::

    {"text": " thus", "top": [[" thus", 0.81], [" so", 0.09]], "pos": 12}

``top_logprobs`` may replace ``top`` (values are converted with exp), extra fields
are ignored, and ``"synthetic": true`` marks a stop surface re-appended by the client.
"""
from __future__ import annotations

import json
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

from .errors import MalformedRecord

THINK_END = '</think>'

TopProbs = Tuple[Tuple[str, float], ...]


class Model(str, Enum):
    LARGE = 'large'
    SMALL = 'small'


@dataclass(frozen=True)
class TokenRecord:
    text: str
    top_probs: TopProbs
    position: int = 0
    synthetic: bool = False

    @classmethod
    def synthetic_stop(cls, surface: str, position: int = 0) -> 'TokenRecord':
        """Stand-in for a stop surface the endpoint did not return as tokens."""
        return cls(text=surface, top_probs=((surface, 1.0), ('', 0.0)), position=position, synthetic=True)

    def at(self, position: int) -> 'TokenRecord':
        if position == self.position:
            return self
        return TokenRecord(self.text, self.top_probs, position, self.synthetic)


def normalize_top(pairs: Iterable[Sequence], from_logprobs: bool = False) -> TopProbs:
    """Coerce ``[[surface, value], ...]`` into a TopProbs tuple, keeping the given order."""
    normalized = []
    for pair in pairs:
        if len(pair) != 2:
            raise MalformedRecord(f"top entry must be [surface, prob], got {pair!r}")
        surface, value = pair
        prob = math.exp(float(value)) if from_logprobs else float(value)
        normalized.append((str(surface), prob))
    return tuple(normalized)


@dataclass(frozen=True)
class Trace:
    """Ordered token records plus provenance.

    ``producers`` is optional; when present it has one entry per token. ``text`` and
    ``offsets`` (character start of each token in ``text``) are derived once.
    """

    tokens: Tuple[TokenRecord, ...]
    source_model: str = ''
    producers: Optional[Tuple[Model, ...]] = None
    trace_id: str = ''
    text: str = field(init=False, repr=False, compare=False)
    offsets: Tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, 'tokens', tuple(self.tokens))
        if self.producers is not None:
            producers = tuple(Model(p) for p in self.producers)
            if len(producers) != len(self.tokens):
                raise MalformedRecord(
                    f"{len(producers)} producer tags for {len(self.tokens)} tokens"
                )
            object.__setattr__(self, 'producers', producers)
        offsets = []
        cursor = 0
        for token in self.tokens:
            offsets.append(cursor)
            cursor += len(token.text)
        object.__setattr__(self, 'offsets', tuple(offsets))
        object.__setattr__(self, 'text', ''.join(t.text for t in self.tokens))

    @classmethod
    def from_texts(
        cls,
        texts: Sequence[str],
        top_probs: Optional[Sequence[TopProbs]] = None,
        source_model: str = '',
    ) -> 'Trace':
        """Build a trace from bare surfaces; missing distributions default to one-hot."""
        records = []
        for i, text in enumerate(texts):
            top = top_probs[i] if top_probs is not None else ((text, 1.0), ('', 0.0))
            records.append(TokenRecord(text=text, top_probs=tuple(top), position=i))
        return cls(tokens=tuple(records), source_model=source_model)

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, index: int) -> TokenRecord:
        return self.tokens[index]

    @property
    def reasoning_end(self) -> int:
        """Index of the token carrying ``</think>``, or the trace length."""
        for i, token in enumerate(self.tokens):
            if THINK_END in token.text:
                return i
        # the closing tag can straddle tokens
        idx = self.text.find(THINK_END)
        if idx >= 0:
            return self.token_at_char(idx)
        return len(self.tokens)

    def token_at_char(self, char_index: int) -> int:
        """Index of the token whose span contains ``char_index``."""
        if not self.tokens:
            raise IndexError('empty trace')
        return max(0, bisect_right(self.offsets, char_index) - 1)


def record_from_json(payload: dict, default_position: int) -> TokenRecord:
    if 'text' not in payload:
        raise MalformedRecord('missing "text" field', default_position)
    if 'top' in payload:
        top = normalize_top(payload['top'])
    elif 'top_logprobs' in payload:
        top = normalize_top(payload['top_logprobs'], from_logprobs=True)
    else:
        raise MalformedRecord('missing "top" field', default_position)
    return TokenRecord(
        text=str(payload['text']),
        top_probs=top,
        position=int(payload.get('pos', default_position)),
        synthetic=bool(payload.get('synthetic', False)),
    )


def record_to_json(record: TokenRecord) -> dict:
    payload = {
        'text': record.text,
        'top': [[surface, prob] for surface, prob in record.top_probs],
        'pos': record.position,
    }
    if record.synthetic:
        payload['synthetic'] = True
    return payload


def load_trace_jsonl(path: Path, source_model: str = '') -> Trace:
    path = Path(path)
    records: List[TokenRecord] = []
    with open(path, 'r', encoding='utf-8') as fh:
        for line_no, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(f"{path.name}:{line_no + 1}: invalid JSON ({exc})") from exc
            records.append(record_from_json(payload, len(records)))
    return Trace(tokens=tuple(records), source_model=source_model, trace_id=path.stem)


def dump_trace_jsonl(trace: Trace, path: Path) -> None:
    # imported lazily: outputs depends on pandas, records is imported everywhere
    from .outputs import write_text_atomic

    lines = [json.dumps(record_to_json(r), ensure_ascii=False) for r in trace.tokens]
    write_text_atomic(Path(path), '\n'.join(lines) + ('\n' if lines else ''))
