"""
Deterministic scripted model backend and the analytical latency simulator.

A script is one or more token paths with fixed top-k distributions. A request's
prompt must be a prefix of a path's text; generation replays the path from the
character right after the prompt, honoring stop strings and max_tokens the way a
completions server does. Nothing here samples, so every call is reproducible.
"""
from __future__ import annotations

import json
import logging
import math
import threading
from bisect import bisect_right
from collections import defaultdict, deque
from dataclasses import dataclass, field
from itertools import groupby
from pathlib import Path
from typing import Any, Deque, Dict, List, Mapping, Optional, Sequence, Tuple

from .client import (
    GenerateResult,
    SamplingParams,
    StopReason,
    Usage,
    ensure_stop_surface,
)
from .errors import BadCostModel, BadRequest, ConfigError, EmptyTranscript, ScriptMiss
from .records import THINK_END, Model, TokenRecord, TopProbs, normalize_top

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScriptToken:
    surface: str
    top_probs: TopProbs


@dataclass(frozen=True)
class ScriptPath:
    tokens: Tuple[ScriptToken, ...]
    text: str = field(init=False, repr=False, compare=False)
    offsets: Tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, 'tokens', tuple(self.tokens))
        offsets, cursor = [], 0
        for token in self.tokens:
            offsets.append(cursor)
            cursor += len(token.surface)
        object.__setattr__(self, 'offsets', tuple(offsets))
        object.__setattr__(self, 'text', ''.join(t.surface for t in self.tokens))

    def token_at_char(self, char_index: int) -> int:
        return max(0, bisect_right(self.offsets, char_index) - 1)


@dataclass(frozen=True)
class Script:
    model_id: str
    paths: Tuple[ScriptPath, ...]
    echo_table: Mapping[str, Tuple[TokenRecord, ...]] = field(default_factory=dict)
    per_token_latency: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, 'paths', tuple(self.paths))
        if not self.paths:
            raise ConfigError(f"script for {self.model_id!r} has no paths")
        for i, path in enumerate(self.paths):
            if path.text.count(THINK_END) > 1:
                raise ConfigError(f"script path {i} of {self.model_id!r} contains more than one {THINK_END}")

    @property
    def stream(self) -> Tuple[ScriptToken, ...]:
        return self.paths[0].tokens

    @classmethod
    def from_surfaces(cls, model_id: str, paths: Sequence[Sequence[str]], margin: float = 0.8,
                      per_token_latency: float = 0.0) -> 'Script':
        """Script whose every token has the given top-1/top-2 margin (handy for fixtures)."""
        built = []
        for surfaces in paths:
            built.append(ScriptPath(tuple(ScriptToken(s, two_way_top(s, margin)) for s in surfaces)))
        return cls(model_id=model_id, paths=tuple(built), per_token_latency=per_token_latency)


def two_way_top(surface: str, margin: float, runner_up: str = '<alt>') -> TopProbs:
    """Top-2 distribution over (surface, runner_up) whose margin is ``margin``."""
    return ((surface, (1.0 + margin) / 2.0), (runner_up, (1.0 - margin) / 2.0))


def load_script(path: Path, model_id: Optional[str] = None) -> Script:
    """Read a JSONL script: ``{"surface", "top", "path"?}`` per line.

    An optional header line ``{"model_id": ..., "per_token_latency": ...}`` without a
    ``surface`` field sets script metadata.
    """
    path = Path(path)
    header: Dict[str, Any] = {}
    by_path: Dict[int, List[ScriptToken]] = defaultdict(list)
    with open(path, 'r', encoding='utf-8') as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path.name}:{line_no}: invalid JSON ({exc})") from exc
            if 'surface' not in payload:
                header.update(payload)
                continue
            if 'top' not in payload:
                raise ConfigError(f"{path.name}:{line_no}: script token without 'top'")
            token = ScriptToken(str(payload['surface']), normalize_top(payload['top']))
            by_path[int(payload.get('path', 0))].append(token)
    paths = tuple(ScriptPath(tuple(by_path[k])) for k in sorted(by_path))
    return Script(
        model_id=model_id or str(header.get('model_id') or path.stem),
        paths=paths,
        per_token_latency=float(header.get('per_token_latency', 0.0)),
    )


def dump_script(script: Script, path: Path) -> None:
    from .outputs import write_text_atomic

    lines = [json.dumps({'model_id': script.model_id, 'per_token_latency': script.per_token_latency})]
    for k, script_path in enumerate(script.paths):
        for token in script_path.tokens:
            entry: Dict[str, Any] = {'surface': token.surface, 'top': [list(p) for p in token.top_probs]}
            if k:
                entry['path'] = k
            lines.append(json.dumps(entry, ensure_ascii=False))
    write_text_atomic(Path(path), '\n'.join(lines) + '\n')


@dataclass(frozen=True)
class GenerateRequest:
    prompt: str
    stop: Tuple[str, ...] = ()
    max_tokens: int = 16
    include_stop_str: bool = True
    seed: Optional[int] = None


def _select_path(script: Script, prompt: str, seed: Optional[int]) -> ScriptPath:
    candidates = [p for p in script.paths if p.text.startswith(prompt)]
    if not candidates:
        raise ScriptMiss(f"prompt is not a prefix of any {script.model_id!r} script path: {prompt[-60:]!r}")
    if seed is None:
        return candidates[0]
    return candidates[seed % len(candidates)]


def _find_stop(text: str, previous_len: int, stops: Sequence[str]) -> Optional[Tuple[str, int]]:
    """Stop string completed by the characters appended after ``previous_len``."""
    hits = []
    for surface in stops:
        start = text.find(surface, max(0, previous_len - len(surface) + 1))
        if start >= 0:
            hits.append((surface, start))
    if not hits:
        return None
    for surface, start in hits:
        if surface == THINK_END:
            return surface, start
    return min(hits, key=lambda hit: (-len(hit[0]), hit[1], hit[0]))


def serve_generate(script: Script, request: GenerateRequest) -> GenerateResult:
    if request.max_tokens < 1:
        raise BadRequest(f"max_tokens must be >= 1, got {request.max_tokens}")
    path = _select_path(script, request.prompt, request.seed)
    offset = len(request.prompt)
    stops = [s for s in request.stop if s]

    index = path.token_at_char(offset) if offset < len(path.text) else len(path.tokens)
    partial = index < len(path.tokens) and offset > path.offsets[index]
    prompt_tokens = index + (1 if partial else 0)

    emitted: List[Tuple[str, TopProbs]] = []
    out_text = ''
    k = index
    stop_reason = StopReason.end_of_sequence()
    while True:
        if len(emitted) >= request.max_tokens:
            stop_reason = StopReason.max_tokens()
            break
        if k >= len(path.tokens):
            break
        token = path.tokens[k]
        surface = token.surface[offset - path.offsets[k]:] if (k == index and partial) else token.surface
        previous_len = len(out_text)
        emitted.append((surface, token.top_probs))
        out_text += surface
        k += 1
        hit = _find_stop(out_text, previous_len, stops)
        if hit is None:
            continue
        matched, start = hit
        stop_reason = StopReason.stop_surface(matched)
        if not request.include_stop_str:
            emitted = _truncate(emitted, start)
        break

    tokens = tuple(
        TokenRecord(text=surface, top_probs=top, position=i) for i, (surface, top) in enumerate(emitted)
    )
    return GenerateResult(
        tokens=tokens,
        stop_reason=stop_reason,
        usage=Usage(prompt_tokens=prompt_tokens, completion_tokens=len(tokens)),
    )


def _truncate(emitted: List[Tuple[str, TopProbs]], cut: int) -> List[Tuple[str, TopProbs]]:
    kept = []
    cursor = 0
    for surface, top in emitted:
        if cursor + len(surface) <= cut:
            kept.append((surface, top))
        elif cursor < cut:
            kept.append((surface[:cut - cursor], top))
        cursor += len(surface)
    return kept


def serve_rescore(script: Script, text: str) -> Tuple[TokenRecord, ...]:
    if not text:
        raise BadRequest('cannot rescore empty text')
    if text in script.echo_table:
        return tuple(script.echo_table[text])
    for path in script.paths:
        if not path.text.startswith(text):
            continue
        records = []
        for k, token in enumerate(path.tokens):
            start = path.offsets[k]
            if start >= len(text):
                break
            surface = token.surface[:len(text) - start]
            if k == 0:
                records.append(TokenRecord.synthetic_stop(surface, position=0))
            else:
                records.append(TokenRecord(text=surface, top_probs=token.top_probs, position=k))
        return tuple(records)
    raise ScriptMiss(f"text not derivable from any {script.model_id!r} script path")


class ScriptedBackend:
    """In-process stand-in for an endpoint client; shareable across threads.

    ``call_history`` keeps the most recent ``history_limit`` calls.
    """

    def __init__(self, script: Script, strip_stop: bool = False, history_limit: int = 1024) -> None:
        self.script = script
        self.strip_stop = strip_stop
        self.call_history: Deque[Dict[str, Any]] = deque(maxlen=history_limit)
        self.simulated_seconds = 0.0
        self._lock = threading.Lock()

    @property
    def model_id(self) -> str:
        return self.script.model_id

    def generate(self, prompt_text: str, stop_surfaces: Sequence[str], max_tokens: int,
                 sampling: SamplingParams = SamplingParams()) -> GenerateResult:
        request = GenerateRequest(
            prompt=prompt_text,
            stop=tuple(stop_surfaces),
            max_tokens=max_tokens,
            include_stop_str=not self.strip_stop,
            seed=sampling.seed,
        )
        raw = serve_generate(self.script, request)
        with self._lock:
            self.call_history.append({'kind': 'generate', 'prompt': prompt_text, 'stop': list(stop_surfaces),
                                      'max_tokens': max_tokens})
            self.simulated_seconds += self.script.per_token_latency * len(raw.tokens)
        return GenerateResult(
            tokens=ensure_stop_surface(raw.tokens, raw.stop_reason),
            stop_reason=raw.stop_reason,
            usage=raw.usage,
        )

    def rescore(self, full_text: str) -> List[TokenRecord]:
        records = serve_rescore(self.script, full_text)
        with self._lock:
            self.call_history.append({'kind': 'rescore', 'prompt': full_text})
        return list(records)

    def health_check(self) -> Dict[str, Any]:
        return {'id': self.script.model_id, 'object': 'model', 'owned_by': 'mocksim'}

    def reset(self) -> None:
        with self._lock:
            self.call_history.clear()
            self.simulated_seconds = 0.0

    def close(self) -> None:
        self.reset()


# --- analytical latency -------------------------------------------------------

@dataclass(frozen=True)
class CostModel:
    large_token_cost: float = 1.0
    small_token_cost: float = 0.25
    switch_overhead: float = 0.0
    prefill_token_cost: float = 0.0

    def __post_init__(self) -> None:
        for name in ('large_token_cost', 'small_token_cost'):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                raise BadCostModel(f"{name} must be positive, got {value}")
        for name in ('switch_overhead', 'prefill_token_cost'):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise BadCostModel(f"{name} must be non-negative, got {value}")

    def decode_cost(self, model: Model) -> float:
        return self.large_token_cost if model is Model.LARGE else self.small_token_cost


@dataclass(frozen=True)
class SpecDecodeProfile:
    mean_accepted_span: float
    verify_cost: Optional[float] = None  # defaults to the large model's per-token cost
    draft_cost_per_token: float = 0.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.mean_accepted_span) or self.mean_accepted_span < 1:
            raise BadCostModel(f"mean_accepted_span must be >= 1, got {self.mean_accepted_span}")
        if self.verify_cost is not None and (not math.isfinite(self.verify_cost) or self.verify_cost <= 0):
            raise BadCostModel(f"verify_cost must be positive, got {self.verify_cost}")
        if not math.isfinite(self.draft_cost_per_token) or self.draft_cost_per_token < 0:
            raise BadCostModel(f"draft_cost_per_token must be non-negative, got {self.draft_cost_per_token}")

    def segment_cost(self, length: int, cost_model: CostModel) -> float:
        verify = self.verify_cost if self.verify_cost is not None else cost_model.large_token_cost
        return math.ceil(length / self.mean_accepted_span) * verify + length * self.draft_cost_per_token


@dataclass(frozen=True)
class LatencyReport:
    total_latency: float
    per_model_breakdown: Dict[str, float]
    baseline_latency: float
    speedup_vs_large_only: float
    switch_count: int

    def to_dict(self) -> dict:
        return {
            'total_latency': self.total_latency,
            'per_model_breakdown': dict(self.per_model_breakdown),
            'baseline_latency': self.baseline_latency,
            'speedup_vs_large_only': self.speedup_vs_large_only,
            'switch_count': self.switch_count,
        }


def segments_from_attribution(attribution: Sequence[Model]) -> List[Tuple[Model, int]]:
    return [(Model(model), sum(1 for _ in run)) for model, run in groupby(attribution)]


def simulate_latency(
    attribution: Sequence[Model],
    cost_model: CostModel,
    spec_profile: Optional[SpecDecodeProfile] = None,
    segments: Optional[Sequence[Tuple[Model, int]]] = None,
) -> LatencyReport:
    """Cost a producer attribution.

    ``segments`` overrides the runs derived from ``attribution``; adjacent segments of
    the same model are separate draft blocks but involve no switch. A model entering
    after a switch prefills every token produced since it last held control.
    """
    if segments is None:
        segments = segments_from_attribution(attribution)
    segments = [(Model(model), int(length)) for model, length in segments]
    if any(length < 1 for _, length in segments):
        raise BadCostModel('segment lengths must be >= 1')
    n_tokens = sum(length for _, length in segments)
    if n_tokens == 0:
        raise EmptyTranscript('nothing to cost: attribution is empty')

    breakdown = {Model.LARGE.value: 0.0, Model.SMALL.value: 0.0, 'switches': 0.0}
    seen_until = {Model.LARGE: 0, Model.SMALL: 0}
    cursor = 0
    previous: Optional[Model] = None
    switches = 0
    for model, length in segments:
        if previous is not None and model is not previous:
            switches += 1
            breakdown['switches'] += cost_model.switch_overhead
            breakdown[model.value] += (cursor - seen_until[model]) * cost_model.prefill_token_cost
        if model is Model.LARGE and spec_profile is not None:
            breakdown[model.value] += spec_profile.segment_cost(length, cost_model)
        else:
            breakdown[model.value] += length * cost_model.decode_cost(model)
        cursor += length
        seen_until[model] = cursor
        previous = model

    total = sum(breakdown.values())
    baseline = n_tokens * cost_model.large_token_cost
    return LatencyReport(
        total_latency=total,
        per_model_breakdown=breakdown,
        baseline_latency=baseline,
        speedup_vs_large_only=baseline / total,
        switch_count=switches,
    )


def spec_only_latency(n_tokens: int, cost_model: CostModel, spec_profile: SpecDecodeProfile) -> LatencyReport:
    """Large-only run accelerated by speculative decoding alone."""
    return simulate_latency([Model.LARGE] * n_tokens, cost_model, spec_profile)
