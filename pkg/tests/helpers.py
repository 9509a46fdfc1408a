"""Shared fixtures: scripted two-cue session, planted calibration corpus, brute-force oracles."""
from __future__ import annotations

from typing import Dict, Iterable, List, Sequence, Set, Tuple

import numpy as np

from relay_switch.cues import expand_variants
from relay_switch.mocksim import Script, two_way_top
from relay_switch.records import Model, TokenRecord, Trace

# --- two-cue session ------------------------------------------------------------

PROMPT_TOKENS: Tuple[str, ...] = ('Q: 2+3?', '\n', '<think>', '\n')
TWO_CUE_BODY: Tuple[str, ...] = (
    ' Let', ' me', ' add', '.', ' So',            # large, stops on "So"
    ' the', ' sum', ' is', ' 5', '.',             # small, stops on "."
    ' Wait',                                      # large, stops on "Wait"
    ',', ' check', ' again', '.',                 # small
    ' Yes', ' 5', '.', '\n', '</think>',          # large, closes reasoning
    '\n\n', 'The', ' answer', ' is', ' \\boxed{5}', '.',  # small answer stage
)
TWO_CUE_PROMPT = ''.join(PROMPT_TOKENS)
CUE_SURFACES = frozenset(expand_variants('so') | expand_variants('wait'))


def two_cue_script(model_id: str, margin: float = 0.8) -> Script:
    return Script.from_surfaces(model_id, [PROMPT_TOKENS + TWO_CUE_BODY], margin=margin)


def immediate_answer_script(model_id: str) -> Script:
    return Script.from_surfaces(model_id, [PROMPT_TOKENS + ('</think>', '\n', 'The answer is 5.')])


# --- traces ---------------------------------------------------------------------

def trace_with_margins(surfaces: Sequence[str], margins: Sequence[float], trace_id: str = 't') -> Trace:
    records = tuple(
        TokenRecord(text=s, top_probs=two_way_top(s, m), position=i)
        for i, (s, m) in enumerate(zip(surfaces, margins))
    )
    return Trace(tokens=records, source_model='large', trace_id=trace_id)


FILLERS = (' alpha', ' beta', ' gamma', ' delta', ' value', ' result', ' term', ' factor')
HIGH_CUES = (' So', ' thus', ' Therefore')
LOW_CUES = (' Wait', ' Hmm', ' But', ' Alternatively', ' now')
TERMINATOR_TOKENS = ('.', '?', '!', '\n')


def _sentence(rng: np.random.Generator, cue: str) -> Tuple[List[str], List[float]]:
    n_fillers = int(rng.integers(3, 9))
    surfaces = ([cue] if cue else []) + [str(rng.choice(FILLERS)) for _ in range(n_fillers)]
    surfaces.append(str(rng.choice(TERMINATOR_TOKENS)))
    if cue in HIGH_CUES:
        low, high = 0.7, 1.0
    elif cue in LOW_CUES:
        low, high = 0.0, 0.3
    else:
        low, high = 0.0, 0.6
    margins = [float(m) for m in rng.uniform(low, high, size=len(surfaces))]
    return surfaces, margins


def planted_corpus(n_traces: int, seed: int = 7) -> List[Trace]:
    """Traces where sentences opened by HIGH_CUES carry high margins and LOW_CUES low ones.

    Every trace has one HIGH_CUES sentence (cycled by index) and one LOW_CUES sentence,
    so every high cue has at least three occurrences from ten traces up.
    """
    rng = np.random.default_rng(seed)
    traces = []
    for i in range(n_traces):
        cues = [HIGH_CUES[i % len(HIGH_CUES)], LOW_CUES[i % len(LOW_CUES)]]
        for _ in range(int(rng.integers(2, 7))):
            pick = rng.random()
            if pick < 0.25:
                cues.append(str(rng.choice(HIGH_CUES)))
            elif pick < 0.5:
                cues.append(str(rng.choice(LOW_CUES)))
            else:
                cues.append('')
        surfaces: List[str] = []
        margins: List[float] = []
        for cue in cues:
            s, m = _sentence(rng, cue)
            surfaces += s
            margins += m
        traces.append(trace_with_margins(surfaces, margins, trace_id=f'trace-{i:03d}'))
    return traces


# --- brute-force oracles ----------------------------------------------------------

def oracle_windows(trace: Trace, canonicals: Iterable[str]) -> List[Tuple[str, List[float]]]:
    """Token-level rescan: each cue token opens a window through the first terminator token."""
    wanted = set(canonicals)
    margins = [r.top_probs[0][1] - r.top_probs[1][1] for r in trace.tokens]
    windows = []
    for i, token in enumerate(trace.tokens):
        key = token.text.strip().rstrip(',').lower()
        if key not in wanted:
            continue
        j = i
        while j < len(trace.tokens) - 1 and not any(c in trace.tokens[j].text for c in '.!?\n'):
            j += 1
        windows.append((key, margins[i:j + 1]))
    return windows


def oracle_selection(traces: Sequence[Trace], canonicals: Iterable[str],
                     min_count: int = 3) -> Tuple[Set[str], Dict[str, int]]:
    pooled = [r.top_probs[0][1] - r.top_probs[1][1] for t in traces for r in t.tokens]
    g_mean = float(np.mean(pooled))
    g_se = float(np.std(pooled)) / np.sqrt(len(pooled))
    per_cue: Dict[str, List[float]] = {}
    for trace in traces:
        for cue, window in oracle_windows(trace, canonicals):
            per_cue.setdefault(cue, []).append(float(np.mean(window)))
    counts = {cue: len(values) for cue, values in per_cue.items()}
    selected = {
        cue for cue, values in per_cue.items()
        if len(values) >= min_count and float(np.mean(values)) >= g_mean + g_se
    }
    return selected, counts


def oracle_occurrences(text: str, surfaces: Iterable[str]) -> List[Tuple[int, str]]:
    """Leftmost, longest-first, non-overlapping scan with alphanumeric boundaries."""
    ordered = sorted(set(surfaces), key=lambda s: (-len(s), s))
    hits = []
    i = 0
    while i < len(text):
        if i > 0 and text[i - 1].isalnum():
            i += 1
            continue
        for surface in ordered:
            if not text.startswith(surface, i):
                continue
            end = i + len(surface)
            if surface[-1].isalnum() and end < len(text) and text[end].isalnum():
                continue
            hits.append((i, surface))
            i = end
            break
        else:
            i += 1
    return hits


def prefill_totals(session) -> Dict[Model, int]:
    """Per model: prefilled + produced + still pending at the end of the session."""
    totals = {}
    context_len = len(session.context)
    for model in Model:
        turns = [t for t in session.turns if t.model is model]
        if not turns:
            continue
        prefilled = sum(t.prefill_tokens for t in turns)
        produced = sum(1 for p in session.producers if p is model)
        pending = context_len - session.seen_until[model]
        totals[model] = prefilled + produced + pending
    return totals
