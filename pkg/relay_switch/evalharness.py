"""
Benchmark runs, answer extraction and the answer-delegation consistency experiment.
"""
from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .calibration import SwitchCueSet, sample_seed
from .client import CompletionBackend, SamplingParams, StopKind
from .errors import BadRequest, EmptyInput, RelaySwitchError
from .metrics import matching_rate
from .records import THINK_END
from .reports import banner, render_table
from .switcher import Budgets, Transcript, run, start_session

logger = logging.getLogger(__name__)

ANSWER_MODES = ('boxed', 'letter')

_BOXED_PREFIXES = ('\\boxed', '\\fbox')
_NUMBER = re.compile(r'[-+]?\d+(?:\.\d+)?')
_ANSWER_MARKER = re.compile(r'answer', re.IGNORECASE)
# a choice letter in parentheses, or standing alone before punctuation or the end of a line
_LETTER = re.compile(r'\(([A-J])\)|(?<![^\W_])([A-J])(?=\s*$|[.,;:!?)\]*])', re.IGNORECASE | re.MULTILINE)


@dataclass(frozen=True)
class Problem:
    id: str
    prompt: str
    reference_answer: Optional[str] = None


def load_problems(path: Path, mode: str = 'boxed') -> List[Problem]:
    """JSONL ``{id, prompt, answer}``; ``answer`` is optional (prompt-only sets)."""
    problems: List[Problem] = []
    seen = set()
    with open(path, 'r', encoding='utf-8') as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise BadRequest(f"{Path(path).name}:{line_no}: invalid JSON ({exc})") from exc
            problem_id = str(payload.get('id', line_no))
            if problem_id in seen:
                raise BadRequest(f"duplicate problem id {problem_id!r} in {path}")
            seen.add(problem_id)
            if 'prompt' not in payload:
                raise BadRequest(f"{Path(path).name}:{line_no}: missing prompt")
            answer = payload.get('answer')
            problems.append(
                Problem(
                    id=problem_id,
                    prompt=str(payload['prompt']),
                    reference_answer=normalize_answer(str(answer), mode) if answer is not None else None,
                )
            )
    return problems


def last_boxed_span(text: str) -> Optional[str]:
    """Contents of the last ``\\boxed{...}`` (brace-balanced), or None."""
    idx = max(text.rfind(prefix) for prefix in _BOXED_PREFIXES)
    if idx < 0:
        return None
    brace = text.find('{', idx)
    if brace < 0:
        return None
    depth = 0
    for i in range(brace, len(text)):
        if text[i] == '{':
            depth += 1
        elif text[i] == '}':
            depth -= 1
            if depth == 0:
                return text[brace + 1:i]
    return None


def _last_letter(text: str) -> Optional[str]:
    matches = list(_LETTER.finditer(text))
    if not matches:
        return None
    last = matches[-1]
    return (last.group(1) or last.group(2)).upper()


def normalize_answer(answer: str, mode: str = 'boxed') -> Optional[str]:
    answer = answer.strip().strip('$').strip()
    answer = answer.rstrip('.').strip()
    if mode == 'letter':
        return _last_letter(answer)
    answer = re.sub(r'\s+', '', answer)
    if not answer:
        return None
    if _NUMBER.fullmatch(answer):
        sign = '-' if answer.startswith('-') else ''
        digits = answer.lstrip('+-')
        integer, _, fraction = digits.partition('.')
        fraction = fraction.rstrip('0')
        integer = integer.lstrip('0') or '0'
        answer = f"{sign}{integer}.{fraction}" if fraction else f"{sign}{integer}"
        if answer == '-0':
            answer = '0'
    return answer


def extract_answer(text: str, mode: str = 'boxed') -> Optional[str]:
    if mode not in ANSWER_MODES:
        raise BadRequest(f"unknown answer mode {mode!r}; expected one of {ANSWER_MODES}")
    boxed = last_boxed_span(text)
    if boxed is not None:
        return normalize_answer(boxed, mode)
    markers = list(_ANSWER_MARKER.finditer(text))
    if not markers:
        return None
    tail = text[markers[-1].end():]
    if mode == 'letter':
        return _last_letter(tail)
    numbers = _NUMBER.findall(tail)
    if not numbers:
        return None
    return normalize_answer(numbers[-1], mode)


@dataclass(frozen=True)
class EvalSample:
    transcript: Transcript
    extracted_answer: Optional[str]
    correct: bool


@dataclass
class EvalRun:
    problem_id: str
    samples: List[EvalSample] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return sum(1 for s in self.samples if s.correct) / len(self.samples)


def pass_at_1(runs: Sequence[EvalRun]) -> float:
    if not runs:
        raise EmptyInput('no evaluation runs')
    rates = []
    for run_ in runs:
        if not run_.samples:
            raise EmptyInput(f"problem {run_.problem_id} has no samples")
        rates.append(run_.accuracy)
    return sum(rates) / len(rates)


def run_benchmark(
    problems: Sequence[Problem],
    large: CompletionBackend,
    small: CompletionBackend,
    cue_set: Union[SwitchCueSet, Iterable[str], None],
    budgets: Budgets = Budgets(),
    sampling: SamplingParams = SamplingParams(),
    samples_per_problem: int = 4,
    jobs: int = 4,
    mode: str = 'boxed',
) -> List[EvalRun]:
    """Problems run concurrently; the samples of one problem run back to back."""
    if samples_per_problem < 1:
        raise BadRequest(f"samples_per_problem must be >= 1, got {samples_per_problem}")
    surfaces = frozenset(cue_set.surfaces) if isinstance(cue_set, SwitchCueSet) else frozenset(cue_set or ())

    def evaluate(problem: Problem) -> EvalRun:
        result = EvalRun(problem.id)
        for index in range(samples_per_problem):
            session = start_session(
                problem.prompt, surfaces, budgets, sampling.with_seed(sample_seed(problem.id, index))
            )
            transcript = run(session, large, small)
            answer = extract_answer(transcript.answer_text, mode)
            correct = answer is not None and answer == problem.reference_answer
            result.samples.append(EvalSample(transcript, answer, correct))
        return result

    runs: Dict[str, EvalRun] = {}
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as executor:
        futures = {executor.submit(evaluate, p): p.id for p in problems}
        for future in as_completed(futures):
            runs[futures[future]] = future.result()
    logger.info(f"Benchmark finished: {len(runs)} problems x {samples_per_problem} samples")
    return [runs[p.id] for p in problems]


# --- answer delegation ------------------------------------------------------------

@dataclass(frozen=True)
class DelegationRow:
    problem_id: str
    large_answer: Optional[str]
    small_answer: Optional[str]

    @property
    def match(self) -> bool:
        return self.large_answer is not None and self.large_answer == self.small_answer


@dataclass(frozen=True)
class DelegationReport:
    total: int
    rows: Tuple[DelegationRow, ...]
    failures: Dict[str, str]

    @property
    def evaluated(self) -> int:
        return len(self.rows)

    @property
    def matches(self) -> int:
        return sum(1 for row in self.rows if row.match)

    @property
    def matching_rate(self) -> Optional[float]:
        if not self.rows:
            return None
        return matching_rate([r.large_answer for r in self.rows], [r.small_answer for r in self.rows])

    @property
    def coverage(self) -> float:
        return self.evaluated / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {
            'total': self.total,
            'evaluated': self.evaluated,
            'matches': self.matches,
            'matching_rate': self.matching_rate,
            'coverage': self.coverage,
            'rows': [
                {'id': r.problem_id, 'large': r.large_answer, 'small': r.small_answer, 'match': r.match}
                for r in self.rows
            ],
            'failures': dict(sorted(self.failures.items())),
        }


def _delegate_one(problem: Problem, large: CompletionBackend, small: CompletionBackend,
                  budgets: Budgets, sampling: SamplingParams, mode: str) -> DelegationRow:
    sampling = sampling.with_seed(sample_seed(problem.id, 0))
    reasoning = large.generate(problem.prompt, [THINK_END], budgets.max_total_tokens, sampling)
    if reasoning.stop_reason.kind is not StopKind.STOP_SURFACE or reasoning.stop_reason.surface != THINK_END:
        raise BadRequest(f"reasoning did not close with {THINK_END} ({reasoning.stop_reason})")
    prefix = problem.prompt + reasoning.text
    remaining = budgets.max_total_tokens - len(reasoning.tokens)
    if remaining < 1:
        raise BadRequest('no token budget left for the answer stage')
    large_answer = large.generate(prefix, [], remaining, sampling)
    small_answer = small.generate(prefix, [], remaining, sampling)
    return DelegationRow(
        problem_id=problem.id,
        large_answer=extract_answer(large_answer.text, mode),
        small_answer=extract_answer(small_answer.text, mode),
    )


def answer_delegation_experiment(
    problems: Sequence[Problem],
    large_client: CompletionBackend,
    small_client: CompletionBackend,
    budgets: Budgets = Budgets(),
    sampling: SamplingParams = SamplingParams(),
    jobs: int = 4,
    mode: str = 'boxed',
) -> DelegationReport:
    """Same reasoning prefix, two answer-stage writers: how often do the answers agree?"""
    rows: Dict[str, DelegationRow] = {}
    failures: Dict[str, str] = {}
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as executor:
        futures = {
            executor.submit(_delegate_one, p, large_client, small_client, budgets, sampling, mode): p.id
            for p in problems
        }
        for future in as_completed(futures):
            problem_id = futures[future]
            try:
                rows[problem_id] = future.result()
            except RelaySwitchError as exc:
                logger.warning(f"[{problem_id}] delegation failed: {exc}")
                failures[problem_id] = str(exc)
    ordered = tuple(rows[p.id] for p in problems if p.id in rows)
    report = DelegationReport(total=len(problems), rows=ordered, failures=failures)
    if failures:
        logger.warning(f"Delegation report covers {report.evaluated}/{report.total} problems")
    return report


def format_delegation_table(report: DelegationReport) -> str:
    rate = report.matching_rate
    lines = banner('ANSWER-STAGE CONSISTENCY')
    lines += render_table(
        ['Total Samples', 'Matches', 'Matching Rate'],
        [[str(report.evaluated), str(report.matches), f"{rate * 100:.2f}%" if rate is not None else '-']],
    )
    if report.failures:
        lines.append('')
        lines.append(f"[WARNING] coverage {report.evaluated}/{report.total}; failed: {', '.join(sorted(report.failures))}")
    return '\n'.join(lines) + '\n'


def format_accuracy_table(runs: Sequence[EvalRun]) -> str:
    rows = [[r.problem_id, str(len(r.samples)), f"{r.accuracy * 100:.2f}"] for r in runs]
    rows.append(['pass@1', '', f"{pass_at_1(runs) * 100:.2f}"])
    return '\n'.join(render_table(['Problem', 'Samples', 'Accuracy (%)'], rows)) + '\n'
