"""
Offline switch-cue selection.

Large-model reasoning traces are scored (by default under the small model), every
cue occurrence gets the mean margin from the cue to the end of its sentence, and a
cue is kept when that mean clears the global token-level mean by one standard error.
"""
from __future__ import annotations

import logging
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from threading import Lock
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .client import CompletionBackend, SamplingParams
from .cues import CueOccurrence, CuePool, default_pool, find_occurrences, next_sentence_end
from .errors import (
    BadRequest,
    EmptySelection,
    InsufficientData,
    MalformedRecord,
    MisalignedInputs,
)
from .margin import MarginSeries, MarginStats, global_margin_stats, margins_from_trace, pooled_stats
from .outputs import read_json, write_json_atomic
from .records import THINK_END, Trace, load_trace_jsonl

logger = logging.getLogger(__name__)

DEFAULT_MIN_COUNT = 3
DEFAULT_SAMPLES_PER_PROMPT = 4
SCORE_UNDER = ('small', 'large')


@dataclass(frozen=True)
class CueStats:
    cue_canonical: str
    occurrence_count: int
    post_sentence_mean: float
    post_sentence_std_err: float
    selected: bool = False

    def to_dict(self) -> dict:
        return {
            'cue': self.cue_canonical,
            'count': self.occurrence_count,
            'mean': self.post_sentence_mean,
            'se': self.post_sentence_std_err,
            'selected': self.selected,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> 'CueStats':
        return cls(
            cue_canonical=str(payload['cue']),
            occurrence_count=int(payload['count']),
            post_sentence_mean=float(payload['mean']),
            post_sentence_std_err=float(payload['se']),
            selected=bool(payload.get('selected', False)),
        )


@dataclass(frozen=True)
class SwitchCueSet:
    model_pair: Tuple[str, str]
    surfaces: Tuple[str, ...]
    selection_report: Tuple[CueStats, ...]
    global_stats: MarginStats
    config_echo: Dict[str, Any] = field(default_factory=dict)

    @property
    def selected(self) -> List[str]:
        return [s.cue_canonical for s in self.selection_report if s.selected]

    def to_dict(self) -> dict:
        return {
            'model_pair': list(self.model_pair),
            'surfaces': list(self.surfaces),
            'report': [s.to_dict() for s in self.selection_report],
            'global': self.global_stats.to_dict(),
            'config_echo': dict(self.config_echo),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> 'SwitchCueSet':
        return cls(
            model_pair=tuple(payload['model_pair']),
            surfaces=tuple(payload['surfaces']),
            selection_report=tuple(CueStats.from_dict(r) for r in payload.get('report', [])),
            global_stats=MarginStats.from_dict(payload['global']),
            config_echo=dict(payload.get('config_echo', {})),
        )

    def save(self, path: Path) -> Path:
        return write_json_atomic(path, self.to_dict())

    @classmethod
    def load(cls, path: Path) -> 'SwitchCueSet':
        return cls.from_dict(read_json(path))


def post_sentence_margin(series: MarginSeries, trace: Trace, occ: CueOccurrence) -> Optional[float]:
    if len(series.values) != len(trace):
        raise MisalignedInputs(f"series has {len(series.values)} values for a trace of {len(trace)} tokens")
    start = occ.token_position
    end = min(next_sentence_end(trace, start), len(trace) - 1)
    window = [series.values[i] for i in range(start, end + 1) if i not in series.excluded]
    if not window:
        return None
    return float(np.mean(window))


def aggregate_cue_stats(pairs: Sequence[Tuple[Trace, MarginSeries]], pool: CuePool) -> List[CueStats]:
    by_cue: Dict[str, List[float]] = {}
    for trace, series in pairs:
        if len(series.values) != len(trace):
            raise MisalignedInputs(
                f"trace {trace.trace_id or '?'}: {len(series.values)} margins for {len(trace)} tokens"
            )
        for occ in find_occurrences(trace, pool):
            value = post_sentence_margin(series, trace, occ)
            if value is not None:
                by_cue.setdefault(occ.cue_canonical, []).append(value)

    stats = []
    for canonical in sorted(by_cue):
        pooled = pooled_stats(by_cue[canonical])
        stats.append(
            CueStats(
                cue_canonical=canonical,
                occurrence_count=pooled.n,
                post_sentence_mean=pooled.mean,
                post_sentence_std_err=pooled.std_err,
            )
        )
    return stats


def _report_order(stats: Sequence[CueStats]) -> List[CueStats]:
    return sorted(stats, key=lambda s: (-s.post_sentence_mean, s.cue_canonical))


def _surfaces_for(canonicals: Sequence[str], pool: CuePool) -> Tuple[str, ...]:
    surfaces = set()
    for canonical in canonicals:
        surfaces.update(pool.get(canonical).variants)
    return tuple(sorted(surfaces))


def select_switch_cues(
    stats: Sequence[CueStats],
    global_stats: MarginStats,
    min_count: int = DEFAULT_MIN_COUNT,
    model_pair: Tuple[str, str] = ('large', 'small'),
    pool: Optional[CuePool] = None,
    config_echo: Optional[Dict[str, Any]] = None,
) -> SwitchCueSet:
    if global_stats.n < 2:
        raise InsufficientData(f"global statistics need n >= 2, got {global_stats.n}")
    pool = pool or default_pool()
    echo = dict(config_echo or {})
    if not stats:
        message = 'no cue occurrences in the calibration traces; the switch cue set is empty'
        logger.warning(message)
        warnings.warn(message, EmptySelection, stacklevel=2)
        return SwitchCueSet(tuple(model_pair), (), (), global_stats, echo)

    threshold = global_stats.threshold
    report = []
    for entry in _report_order(stats):
        keep = entry.occurrence_count >= min_count and entry.post_sentence_mean >= threshold
        report.append(
            CueStats(entry.cue_canonical, entry.occurrence_count, entry.post_sentence_mean,
                     entry.post_sentence_std_err, selected=keep)
        )
    chosen = [s.cue_canonical for s in report if s.selected]
    logger.info(
        f"Selected {len(chosen)}/{len(report)} cues above threshold {threshold:.4f} "
        f"(mean {global_stats.mean:.4f} + SE {global_stats.std_err:.4f}): {', '.join(chosen) or 'none'}"
    )
    return SwitchCueSet(tuple(model_pair), _surfaces_for(chosen, pool), tuple(report), global_stats, echo)


def all_candidates_cue_set(
    stats: Sequence[CueStats],
    global_stats: MarginStats,
    model_pair: Tuple[str, str] = ('large', 'small'),
    pool: Optional[CuePool] = None,
    config_echo: Optional[Dict[str, Any]] = None,
) -> SwitchCueSet:
    """Ablation: every cue in the pool becomes a stop surface, no thresholding."""
    pool = pool or default_pool()
    echo = dict(config_echo or {})
    echo['selection'] = 'all_candidates'
    report = tuple(
        CueStats(s.cue_canonical, s.occurrence_count, s.post_sentence_mean, s.post_sentence_std_err, True)
        for s in _report_order(stats)
    )
    return SwitchCueSet(tuple(model_pair), tuple(sorted(pool.surfaces())), report, global_stats, echo)


# --- trace acquisition --------------------------------------------------------

@dataclass(frozen=True)
class CalibrationItem:
    """One large-model trace, optionally with its small-model rescoring."""

    trace_id: str
    large_trace: Trace
    rescored: Optional[Trace] = None


class RecordedTraceSource:
    """``traces_dir/*.jsonl`` large-model traces, with optional same-name rescorings."""

    def __init__(self, traces_dir: Path, rescored_dir: Optional[Path] = None, limit: Optional[int] = None) -> None:
        self.traces_dir = Path(traces_dir)
        self.rescored_dir = Path(rescored_dir) if rescored_dir else None
        self.limit = limit

    def __iter__(self) -> Iterator[CalibrationItem]:
        files = sorted(self.traces_dir.glob('*.jsonl'))
        if not files:
            raise BadRequest(f"no *.jsonl traces in {self.traces_dir}")
        if self.limit is not None:
            files = files[: self.limit]
        for path in files:
            rescored = None
            if self.rescored_dir is not None and (self.rescored_dir / path.name).exists():
                rescored = load_trace_jsonl(self.rescored_dir / path.name, source_model='small')
            yield CalibrationItem(path.stem, load_trace_jsonl(path, source_model='large'), rescored)


def sample_seed(item_id: str, sample_index: int) -> int:
    """Stable seed per (prompt or problem, sample index)."""
    return zlib.crc32(f"{item_id}:{sample_index}".encode('utf-8'))


class EndpointTraceSource:
    """Generates reasoning traces from the large model for each prompt and sample index."""

    def __init__(
        self,
        large: CompletionBackend,
        prompts: Sequence[Tuple[str, str]],
        samples_per_prompt: int = DEFAULT_SAMPLES_PER_PROMPT,
        max_tokens: int = 32768,
        sampling: SamplingParams = SamplingParams(),
        jobs: int = 4,
    ) -> None:
        if samples_per_prompt < 1:
            raise BadRequest(f"samples_per_prompt must be >= 1, got {samples_per_prompt}")
        self.large = large
        self.prompts = list(prompts)
        self.samples_per_prompt = samples_per_prompt
        self.max_tokens = max_tokens
        self.sampling = sampling
        self.jobs = jobs

    def _generate(self, prompt_id: str, prompt: str, sample_index: int) -> CalibrationItem:
        sampling = self.sampling.with_seed(sample_seed(prompt_id, sample_index))
        result = self.large.generate(prompt, [THINK_END], self.max_tokens, sampling)
        trace_id = f"{prompt_id}-s{sample_index}"
        trace = Trace(tokens=result.tokens, source_model=self.large.model_id, trace_id=trace_id)
        return CalibrationItem(trace_id, trace)

    def __iter__(self) -> Iterator[CalibrationItem]:
        jobs = [(pid, prompt, s) for pid, prompt in self.prompts for s in range(self.samples_per_prompt)]
        results: Dict[str, CalibrationItem] = {}
        with ThreadPoolExecutor(max_workers=max(1, self.jobs)) as executor:
            futures = {executor.submit(self._generate, *job): job for job in jobs}
            for future in as_completed(futures):
                item = future.result()
                results[item.trace_id] = item
        logger.info(f"Generated {len(results)} calibration traces from {len(self.prompts)} prompts")
        for trace_id in sorted(results):
            yield results[trace_id]


# --- pipeline -------------------------------------------------------------------

@dataclass
class CalibrationConfig:
    model_pair: Tuple[str, str] = ('large', 'small')
    min_count: int = DEFAULT_MIN_COUNT
    score_under: str = 'small'
    all_candidates: bool = False
    jobs: int = 4
    config_echo: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.score_under not in SCORE_UNDER:
            raise BadRequest(f"score_under must be one of {SCORE_UNDER}, got {self.score_under!r}")
        if self.min_count < 1:
            raise BadRequest(f"min_count must be >= 1, got {self.min_count}")


@dataclass(frozen=True)
class CalibrationResult:
    cue_set: SwitchCueSet
    n_traces: int
    n_tokens: int


def _reasoning_part(trace: Trace) -> Trace:
    end = trace.reasoning_end
    if end >= len(trace):
        return trace
    # keep the closing tag's token, drop the answer stage
    return Trace(tokens=trace.tokens[: end + 1], source_model=trace.source_model, trace_id=trace.trace_id)


def _scored_trace(item: CalibrationItem, config: CalibrationConfig,
                  small: Optional[CompletionBackend]) -> Trace:
    if config.score_under == 'large':
        return _reasoning_part(item.large_trace)
    if item.rescored is not None:
        return _reasoning_part(item.rescored)
    if small is None:
        raise BadRequest(f"trace {item.trace_id} has no small-model rescoring and no small endpoint is configured")
    text = _reasoning_part(item.large_trace).text
    records = small.rescore(text)
    return Trace(tokens=tuple(records), source_model=small.model_id, trace_id=item.trace_id)


def calibrate(
    config: CalibrationConfig,
    trace_source,
    small: Optional[CompletionBackend] = None,
    pool: Optional[CuePool] = None,
) -> CalibrationResult:
    """Traces → (rescoring) → margins → per-cue statistics → switch cue set.

    Rescoring fans out over ``config.jobs`` workers; results are reduced in trace-id
    order so the output does not depend on completion order.
    """
    pool = pool or default_pool()
    items = list(trace_source)
    if not items:
        raise InsufficientData('trace source yielded no traces')

    scored: Dict[str, Trace] = {}
    lock = Lock()

    def score(item: CalibrationItem) -> None:
        trace = _scored_trace(item, config, small)
        with lock:
            scored[item.trace_id] = trace

    with ThreadPoolExecutor(max_workers=max(1, config.jobs)) as executor:
        futures = [executor.submit(score, item) for item in items]
        for future in as_completed(futures):
            future.result()

    pairs = []
    for trace_id in sorted(scored):
        trace = scored[trace_id]
        try:
            series = margins_from_trace(trace)
        except MalformedRecord as exc:
            raise MalformedRecord(f"trace {trace_id}: {exc}", position=exc.position) from exc
        pairs.append((trace, series))

    global_stats = global_margin_stats([series for _, series in pairs])
    stats = aggregate_cue_stats(pairs, pool)
    echo = dict(config.config_echo)
    echo.update({'min_count': config.min_count, 'score_under': config.score_under, 'n_traces': len(pairs)})
    if config.all_candidates:
        cue_set = all_candidates_cue_set(stats, global_stats, config.model_pair, pool, echo)
    else:
        echo['selection'] = 'threshold'
        cue_set = select_switch_cues(stats, global_stats, config.min_count, config.model_pair, pool, echo)
    n_tokens = sum(len(trace) for trace, _ in pairs)
    logger.info(f"Calibrated on {len(pairs)} traces ({n_tokens} tokens); {len(cue_set.surfaces)} stop surfaces")
    return CalibrationResult(cue_set=cue_set, n_traces=len(pairs), n_tokens=n_tokens)


def format_cue_set_table(cue_set: SwitchCueSet) -> str:
    """Model pair and selected surfaces, then the per-cue selection report."""
    large, small = cue_set.model_pair
    g = cue_set.global_stats
    surfaces = ', '.join(f'"{s}"' for s in cue_set.surfaces) or '(none)'
    lines: List[str] = []
    lines.append('=' * 80)
    lines.append('SWITCH CUE SET')
    lines.append('=' * 80)
    lines.append(f"Large--Small model pair : {large} -- {small}")
    lines.append(f"Selected switch cues    : {{{surfaces}}}")
    lines.append(
        f"Global margin           : mean={g.mean:.4f} std={g.std_dev:.4f} se={g.std_err:.6f} n={g.n}"
    )
    lines.append(f"Selection threshold     : {g.threshold:.4f}")
    lines.append('')
    lines.append(f"{'cue':<16}{'count':>8}{'mean':>10}{'se':>10}  selected")
    lines.append('-' * 56)
    for row in cue_set.selection_report:
        mark = 'yes' if row.selected else 'no'
        lines.append(
            f"{row.cue_canonical:<16}{row.occurrence_count:>8d}{row.post_sentence_mean:>10.4f}"
            f"{row.post_sentence_std_err:>10.4f}  {mark}"
        )
    return '\n'.join(lines) + '\n'
