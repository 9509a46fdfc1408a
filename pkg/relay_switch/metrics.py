"""Deployment metrics over session transcripts: utilization, switches, prefill, consistency."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import pandas as pd

from .errors import EmptyInput, EmptyTranscript, MisalignedInputs
from .records import Model
from .reports import mean_std, render_table

if TYPE_CHECKING:
    from .switcher import Session, Transcript

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SessionStats:
    total_tokens: int
    large_tokens: int
    small_tokens: int
    switch_count_by_direction: Dict[str, int]
    prefill_tokens_by_model: Dict[str, int]
    utilization: float

    def to_dict(self) -> dict:
        return {
            'total_tokens': self.total_tokens,
            'large_tokens': self.large_tokens,
            'small_tokens': self.small_tokens,
            'switch_count_by_direction': dict(self.switch_count_by_direction),
            'prefill_tokens_by_model': dict(self.prefill_tokens_by_model),
            'utilization': self.utilization,
        }

    def as_metrics(self) -> Dict[str, float]:
        """Flat numeric view used by ``aggregate``."""
        metrics: Dict[str, float] = {
            'utilization': self.utilization,
            'total_tokens': float(self.total_tokens),
            'large_tokens': float(self.large_tokens),
            'small_tokens': float(self.small_tokens),
            'switches': float(sum(self.switch_count_by_direction.values())),
        }
        for direction, count in self.switch_count_by_direction.items():
            metrics[f'switches_{direction}'] = float(count)
        for model, count in self.prefill_tokens_by_model.items():
            metrics[f'prefill_{model}'] = float(count)
        return metrics


def _producers(transcript: Union['Transcript', 'Session', Sequence[Union[Model, str]]]) -> List[Model]:
    producers = getattr(transcript, 'producers', transcript)
    return [Model(p) for p in producers]


def utilization(transcript) -> float:
    producers = _producers(transcript)
    if not producers:
        raise EmptyTranscript('transcript has no generated tokens')
    large = sum(1 for p in producers if p is Model.LARGE)
    return large / len(producers)


def session_stats(session: 'Session') -> SessionStats:
    # imported here: switcher imports this module lazily for Transcript.to_dict
    from .switcher import Direction

    session = getattr(session, 'session', session)
    producers = _producers(session)
    if not producers:
        raise EmptyTranscript('session has no generated tokens')
    large = sum(1 for p in producers if p is Model.LARGE)
    switches = {d.value: 0 for d in Direction}
    for event in session.events:
        switches[event.direction.value] += 1
    prefill = {m.value: 0 for m in Model}
    for turn in session.turns:
        prefill[turn.model.value] += turn.prefill_tokens
    return SessionStats(
        total_tokens=len(producers),
        large_tokens=large,
        small_tokens=len(producers) - large,
        switch_count_by_direction=switches,
        prefill_tokens_by_model=prefill,
        utilization=large / len(producers),
    )


def matching_rate(answers_ref: Sequence[Optional[str]], answers_test: Sequence[Optional[str]]) -> float:
    """Exact-match fraction; an absent answer never matches."""
    if len(answers_ref) != len(answers_test):
        raise MisalignedInputs(f"{len(answers_ref)} reference answers vs {len(answers_test)} test answers")
    if not answers_ref:
        raise EmptyInput('no answers to compare')
    matches = sum(1 for a, b in zip(answers_ref, answers_test) if a is not None and a == b)
    return matches / len(answers_ref)


@dataclass(frozen=True)
class CorpusSummary:
    n_sessions: int
    metrics: Dict[str, Tuple[float, float]]

    def mean(self, metric: str) -> float:
        return self.metrics[metric][0]

    def std(self, metric: str) -> float:
        return self.metrics[metric][1]

    def to_dict(self) -> dict:
        return {
            'n_sessions': self.n_sessions,
            'metrics': {name: {'mean': m, 'std': s} for name, (m, s) in sorted(self.metrics.items())},
        }


def aggregate(stats_list: Sequence[Union[SessionStats, Mapping[str, Any]]]) -> CorpusSummary:
    """Per-metric mean and population std over sessions."""
    if not stats_list:
        raise EmptyInput('no sessions to aggregate')
    rows = [s.as_metrics() if isinstance(s, SessionStats) else dict(s) for s in stats_list]
    frame = pd.DataFrame(rows).apply(pd.to_numeric, errors='coerce')
    means = frame.mean()
    stds = frame.std(ddof=0)
    metrics = {
        str(column): (float(means[column]), float(stds[column]))
        for column in frame.columns
    }
    return CorpusSummary(n_sessions=len(rows), metrics=metrics)


# (metric key, row label, display scale)
REPORT_ROWS: Tuple[Tuple[str, str, float], ...] = (
    ('speedup', 'Speedup (×)', 1.0),
    ('utilization', 'Large-Model Utilization (%)', 100.0),
)


def format_report(columns: Mapping[str, CorpusSummary], rows=REPORT_ROWS) -> str:
    """Aligned table: one row per metric, one "mean ± std" column per method."""
    names = list(columns)
    header = ['Metric'] + names
    body = []
    for key, label, scale in rows:
        line = [label]
        for name in names:
            summary = columns[name]
            if key in summary.metrics:
                line.append(mean_std(summary.mean(key), summary.std(key), scale))
            else:
                line.append('-')
        body.append(line)
    return '\n'.join(render_table(header, body)) + '\n'
