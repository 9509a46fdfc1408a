"""Token-level probability margins (top-1 minus top-2) and their pooled statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import FrozenSet, List, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import BadWindow, InsufficientData, MalformedRecord
from .records import Trace

# slack on the sum of listed probabilities (endpoints round logprobs)
PROB_SUM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class MarginSeries:
    values: Tuple[float, ...]
    source_model: str = ''
    excluded: FrozenSet[int] = field(default_factory=frozenset)

    def __len__(self) -> int:
        return len(self.values)

    def included_values(self) -> List[float]:
        """Values that count towards statistics (synthetic positions dropped)."""
        if not self.excluded:
            return list(self.values)
        return [v for i, v in enumerate(self.values) if i not in self.excluded]


@dataclass(frozen=True)
class MarginStats:
    mean: float
    std_dev: float
    std_err: float
    n: int

    @property
    def threshold(self) -> float:
        """Selection bar for switch cues: one standard error above the mean."""
        return self.mean + self.std_err

    def to_dict(self) -> dict:
        return {'mean': self.mean, 'std': self.std_dev, 'se': self.std_err, 'n': self.n}

    @classmethod
    def from_dict(cls, payload: dict) -> 'MarginStats':
        return cls(
            mean=float(payload['mean']),
            std_dev=float(payload['std']),
            std_err=float(payload['se']),
            n=int(payload['n']),
        )


def compute_margin(top_probs: Sequence[Tuple[str, float]]) -> float:
    if len(top_probs) < 2:
        raise MalformedRecord(f"need at least 2 top entries, got {len(top_probs)}")
    previous = math.inf
    total = 0.0
    for surface, prob in top_probs:
        if not isinstance(prob, (int, float)) or math.isnan(prob) or prob < 0.0 or prob > 1.0:
            raise MalformedRecord(f"probability out of range for {surface!r}: {prob!r}")
        if prob > previous:
            raise MalformedRecord('top_probs not sorted in descending order')
        previous = prob
        total += prob
    if total > 1.0 + PROB_SUM_TOLERANCE:
        raise MalformedRecord(f"listed probabilities sum to {total:.6f} > 1")
    return float(top_probs[0][1] - top_probs[1][1])


def margins_from_trace(trace: Trace, source_model: str = '') -> MarginSeries:
    values = []
    excluded = []
    for i, record in enumerate(trace.tokens):
        try:
            values.append(compute_margin(record.top_probs))
        except MalformedRecord as exc:
            raise MalformedRecord(str(exc), position=i) from exc
        if record.synthetic:
            excluded.append(i)
    return MarginSeries(
        values=tuple(values),
        source_model=source_model or trace.source_model,
        excluded=frozenset(excluded),
    )


def pooled_stats(values: Sequence[float]) -> MarginStats:
    """Mean, population std and standard error of ``values`` (sorted first so the
    result does not depend on the order the values were gathered in)."""
    arr = np.sort(np.asarray(values, dtype=float))
    n = int(arr.size)
    if n == 0:
        raise InsufficientData('no values to pool')
    mean = float(np.mean(arr))
    std_dev = float(np.std(arr))
    return MarginStats(mean=mean, std_dev=std_dev, std_err=std_dev / math.sqrt(n), n=n)


def global_margin_stats(series_list: Sequence[MarginSeries]) -> MarginStats:
    pooled: List[float] = []
    for series in series_list:
        pooled.extend(series.included_values())
    if len(pooled) < 2:
        raise InsufficientData(f"need at least 2 token positions, got {len(pooled)}")
    return pooled_stats(pooled)


def margin_trajectory(series: MarginSeries, window: int) -> List[float]:
    """Centered moving average with truncated windows at both edges.

    An even ``window`` cannot be centered: position i averages ``window // 2`` positions
    before it, itself, and ``window // 2 - 1`` after it.
    """
    if window < 1 or window > len(series.values):
        raise BadWindow(f"window {window} invalid for series of length {len(series.values)}")
    smoothed = pd.Series(series.values, dtype=float).rolling(window, center=True, min_periods=1).mean()
    return [float(v) for v in smoothed]
