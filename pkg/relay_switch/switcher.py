"""
Runtime switching between a large and a small model.

The large model reasons until it emits a calibrated switch cue (a stop surface);
the small model then continues to the end of the sentence and hands control back.
Once either model closes the reasoning stage with ``</think>``, the small model
writes the whole answer.

A Session is mutated in place by ``apply_turn`` and belongs to one worker at a time.
"""
from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

from .calibration import SwitchCueSet, sample_seed
from .client import CompletionBackend, GenerateResult, SamplingParams, StopKind, StopReason
from .cues import SENTENCE_TERMINATORS, at_word_boundary
from .errors import BadRequest, ProtocolViolation, RelaySwitchError, SessionClosed
from .records import THINK_END, Model, TokenRecord

logger = logging.getLogger(__name__)

DEFAULT_MAX_TOTAL_TOKENS = 32768
DEFAULT_MAX_SMALL_SEGMENT_TOKENS = 128

SMALL_REASONING_STOPS: Tuple[str, ...] = SENTENCE_TERMINATORS + (THINK_END,)


class Phase(str, Enum):
    REASONING = 'reasoning'
    ANSWER = 'answer'
    DONE = 'done'


class Direction(str, Enum):
    LARGE_TO_SMALL = 'large_to_small'
    SMALL_TO_LARGE = 'small_to_large'
    TO_ANSWER_STAGE = 'to_answer_stage'


@dataclass(frozen=True)
class Budgets:
    max_total_tokens: int = DEFAULT_MAX_TOTAL_TOKENS
    max_small_segment_tokens: int = DEFAULT_MAX_SMALL_SEGMENT_TOKENS

    def validate(self) -> None:
        if self.max_total_tokens < 1:
            raise BadRequest(f"max_total_tokens must be >= 1, got {self.max_total_tokens}")
        if self.max_small_segment_tokens < 1:
            raise BadRequest(f"max_small_segment_tokens must be >= 1, got {self.max_small_segment_tokens}")


@dataclass(frozen=True)
class SwitchEvent:
    at_position: int
    direction: Direction
    trigger: str
    prefill_new_tokens: int

    def to_dict(self) -> dict:
        return {
            'at_position': self.at_position,
            'direction': self.direction.value,
            'trigger': self.trigger,
            'prefill_new_tokens': self.prefill_new_tokens,
        }


@dataclass(frozen=True)
class GenerationTurn:
    model: Model
    stop_surfaces: Tuple[str, ...]
    max_tokens: int
    emitted: Tuple[TokenRecord, ...] = ()
    stop_reason: Optional[StopReason] = None

    def completed(self, result: GenerateResult) -> 'GenerationTurn':
        return replace(self, emitted=tuple(result.tokens), stop_reason=result.stop_reason)


@dataclass(frozen=True)
class ContextToken:
    record: TokenRecord
    producer: Model


@dataclass(frozen=True)
class TurnRecord:
    model: Model
    start: int
    emitted: int
    prefill_tokens: int
    stop_reason: StopReason


def estimate_prompt_tokens(prompt: str) -> int:
    """Word/punctuation count; replaced by the server's count once a response arrives."""
    return len(re.findall(r'\w+|[^\w\s]', prompt))


@dataclass
class Session:
    prompt: str
    cue_surfaces: FrozenSet[str]
    budgets: Budgets = Budgets()
    sampling: SamplingParams = SamplingParams()
    context: List[ContextToken] = field(default_factory=list)
    phase: Phase = Phase.REASONING
    active_model: Model = Model.LARGE
    events: List[SwitchEvent] = field(default_factory=list)
    turns: List[TurnRecord] = field(default_factory=list)
    prompt_tokens: int = 0
    end_reason: Optional[str] = None
    # context length each model has ingested; absent = has not seen the prompt yet
    seen_until: Dict[Model, int] = field(default_factory=dict)

    @property
    def text(self) -> str:
        return ''.join(t.record.text for t in self.context)

    @property
    def producers(self) -> List[Model]:
        return [t.producer for t in self.context]

    @property
    def remaining_tokens(self) -> int:
        return self.budgets.max_total_tokens - len(self.context)

    @property
    def reached_answer(self) -> bool:
        return any(e.direction is Direction.TO_ANSWER_STAGE for e in self.events)


def _cue_surfaces(cue_set: Union[SwitchCueSet, Iterable[str], None]) -> FrozenSet[str]:
    if cue_set is None:
        return frozenset()
    if isinstance(cue_set, SwitchCueSet):
        return frozenset(cue_set.surfaces)
    return frozenset(cue_set)


def start_session(
    prompt: str,
    cue_set: Union[SwitchCueSet, Iterable[str], None],
    budgets: Budgets = Budgets(),
    sampling: SamplingParams = SamplingParams(),
    prompt_tokens: Optional[int] = None,
) -> Session:
    if not prompt:
        raise BadRequest('prompt is empty')
    budgets.validate()
    surfaces = _cue_surfaces(cue_set)
    if not surfaces:
        logger.info('Empty switch cue set: the large model reasons alone until </think>')
    return Session(
        prompt=prompt,
        cue_surfaces=surfaces,
        budgets=budgets,
        sampling=sampling,
        prompt_tokens=estimate_prompt_tokens(prompt) if prompt_tokens is None else prompt_tokens,
    )


def next_turn_request(session: Session) -> GenerationTurn:
    if session.phase is Phase.DONE:
        raise SessionClosed('session is done')
    remaining = session.remaining_tokens
    if session.phase is Phase.ANSWER:
        return GenerationTurn(Model.SMALL, (), remaining)
    if session.active_model is Model.LARGE:
        stops = tuple(sorted(session.cue_surfaces - {THINK_END})) + (THINK_END,)
        return GenerationTurn(Model.LARGE, stops, remaining)
    cap = min(remaining, session.budgets.max_small_segment_tokens)
    return GenerationTurn(Model.SMALL, SMALL_REASONING_STOPS, cap)


def prefill_accounting(session: Session, target_model: Model) -> int:
    seen = session.seen_until.get(target_model)
    if seen is None:
        return session.prompt_tokens + len(session.context)
    return len(session.context) - seen


@dataclass(frozen=True)
class _Transition:
    phase: Phase
    active: Model
    direction: Optional[Direction] = None
    trigger: str = ''
    end_reason: Optional[str] = None


def _closes_reasoning(emitted: Sequence[TokenRecord], stop: StopReason) -> bool:
    if stop.kind is StopKind.STOP_SURFACE and stop.surface == THINK_END:
        return True
    return THINK_END in ''.join(t.text for t in emitted)


def _cue_inside_word(session: Session, emitted: Sequence[TokenRecord], surface: str) -> bool:
    text = session.prompt + session.text + ''.join(t.text for t in emitted)
    # the stop is completed by the last emitted record
    start = text.find(surface, max(0, len(text) - len(emitted[-1].text) - len(surface) + 1))
    if start < 0:
        return False
    return not at_word_boundary(text, start, start + len(surface))


def _transition(session: Session, model: Model, stop: StopReason, emitted: Sequence[TokenRecord],
                exhausted: bool) -> _Transition:
    if session.phase is Phase.ANSWER:
        if model is not Model.SMALL:
            raise ProtocolViolation('the answer stage is produced by the small model only')
        if stop.kind is StopKind.STOP_SURFACE:
            raise ProtocolViolation(f"answer-stage turn stopped on {stop.surface!r} but carries no stops")
        if stop.kind is StopKind.END_OF_SEQUENCE:
            return _Transition(Phase.DONE, Model.SMALL, end_reason='eos')
        if exhausted:
            return _Transition(Phase.DONE, Model.SMALL, end_reason='budget')
        return _Transition(Phase.ANSWER, Model.SMALL)

    # reasoning stage
    if _closes_reasoning(emitted, stop):
        if model is Model.LARGE:
            text = ''.join(t.text for t in emitted)
            if not text.rstrip().endswith(THINK_END) and THINK_END in text:
                raise ProtocolViolation('large model produced answer-stage tokens after </think>')
        end_reason = 'eos' if stop.kind is StopKind.END_OF_SEQUENCE else None
        phase = Phase.DONE if end_reason else Phase.ANSWER
        return _Transition(phase, Model.SMALL, Direction.TO_ANSWER_STAGE, THINK_END, end_reason)

    if stop.kind is StopKind.STOP_SURFACE:
        surface = stop.surface
        if model is Model.LARGE and surface in session.cue_surfaces:
            if _cue_inside_word(session, emitted, surface):
                logger.debug(f"Cue {surface!r} matched inside a word; the large model keeps going")
                return _Transition(Phase.REASONING, Model.LARGE)
            return _Transition(Phase.REASONING, Model.SMALL, Direction.LARGE_TO_SMALL, surface)
        if model is Model.SMALL and surface in SENTENCE_TERMINATORS:
            return _Transition(Phase.REASONING, Model.LARGE, Direction.SMALL_TO_LARGE, 'sentence_end')
        raise ProtocolViolation(f"{model.value} model cannot stop on {surface!r} during reasoning")

    if stop.kind is StopKind.END_OF_SEQUENCE:
        return _Transition(Phase.DONE, model, end_reason='eos')

    # MaxTokens
    if exhausted:
        return _Transition(Phase.DONE, model, end_reason='budget')
    if model is Model.SMALL:
        return _Transition(Phase.REASONING, Model.LARGE, Direction.SMALL_TO_LARGE, 'budget')
    return _Transition(Phase.REASONING, Model.LARGE)


def apply_turn(session: Session, turn: GenerationTurn) -> Session:
    if session.phase is Phase.DONE:
        raise SessionClosed('session is done')
    if turn.model is not session.active_model:
        raise ProtocolViolation(
            f"turn by the {turn.model.value} model while the {session.active_model.value} model is active"
        )
    stop = turn.stop_reason
    if stop is None:
        raise ProtocolViolation('turn has no stop reason; it was never completed')
    if stop.kind is StopKind.STOP_SURFACE and stop.surface not in turn.stop_surfaces:
        raise ProtocolViolation(f"stop surface {stop.surface!r} was not requested")
    if not turn.emitted and stop.kind is not StopKind.END_OF_SEQUENCE:
        raise ProtocolViolation(f"{turn.model.value} turn produced no tokens ({stop})")

    start = len(session.context)
    emitted = list(turn.emitted)
    if len(emitted) > session.remaining_tokens:
        logger.debug(f"Truncating {len(emitted) - session.remaining_tokens} tokens beyond the session budget")
        emitted = emitted[: session.remaining_tokens]
        # whatever ended the turn was in the dropped tail
        stop = StopReason.max_tokens()
    exhausted = start + len(emitted) >= session.budgets.max_total_tokens
    transition = _transition(session, turn.model, stop, emitted, exhausted)

    prefill = prefill_accounting(session, turn.model)
    for offset, record in enumerate(emitted):
        session.context.append(ContextToken(record.at(start + offset), turn.model))
    session.seen_until[turn.model] = len(session.context)
    session.turns.append(TurnRecord(turn.model, start, len(emitted), prefill, stop))

    if transition.direction is not None:
        session.events.append(
            SwitchEvent(
                at_position=len(session.context),
                direction=transition.direction,
                trigger=transition.trigger,
                prefill_new_tokens=prefill_accounting(session, transition.active),
            )
        )
    session.phase = transition.phase
    session.active_model = transition.active
    if session.phase is not Phase.DONE and len(session.context) >= session.budgets.max_total_tokens:
        session.phase = Phase.DONE
        transition = replace(transition, end_reason='budget')
    if session.phase is Phase.DONE:
        session.end_reason = transition.end_reason or 'budget'
        if not session.reached_answer:
            logger.warning(f"Session ended ({session.end_reason}) without closing the reasoning stage")
    return session


@dataclass
class Transcript:
    session: Session
    aborted: bool = False
    error: Optional[str] = None

    @property
    def text(self) -> str:
        return self.session.text

    @property
    def producers(self) -> List[Model]:
        return self.session.producers

    @property
    def events(self) -> List[SwitchEvent]:
        return self.session.events

    @property
    def answer_text(self) -> str:
        """Text after ``</think>`` (the whole text when the reasoning stage never closed)."""
        text = self.text
        idx = text.find(THINK_END)
        return text if idx < 0 else text[idx + len(THINK_END):]

    def to_dict(self) -> dict:
        from .metrics import session_stats

        session = self.session
        return {
            'text': session.text,
            'tokens': [
                {'text': t.record.text, 'producer': t.producer.value, 'pos': t.record.position,
                 **({'synthetic': True} if t.record.synthetic else {})}
                for t in session.context
            ],
            'events': [e.to_dict() for e in session.events],
            'stats': session_stats(session).to_dict() if session.context else None,
            'phase': session.phase.value,
            'end_reason': session.end_reason,
            'reached_answer': session.reached_answer,
            'aborted': self.aborted,
            'error': self.error,
        }


def run(session: Session, large_client: CompletionBackend, small_client: CompletionBackend) -> Transcript:
    clients = {Model.LARGE: large_client, Model.SMALL: small_client}
    while session.phase is not Phase.DONE:
        request = next_turn_request(session)
        try:
            result = clients[request.model].generate(
                session.prompt + session.text, request.stop_surfaces, request.max_tokens, session.sampling
            )
        except RelaySwitchError as exc:
            logger.warning(f"Aborting session after {len(session.context)} tokens: {exc}")
            session.phase = Phase.DONE
            session.end_reason = 'aborted'
            return Transcript(session, aborted=True, error=str(exc))
        if not session.turns and result.usage.prompt_tokens:
            session.prompt_tokens = result.usage.prompt_tokens
        apply_turn(session, request.completed(result))
    logger.debug(
        f"Session done ({session.end_reason}): {len(session.context)} tokens, {len(session.events)} switch events"
    )
    return Transcript(session)


def run_many(
    prompts: Sequence[Tuple[str, str]],
    large_client: CompletionBackend,
    small_client: CompletionBackend,
    cue_set: Union[SwitchCueSet, Iterable[str], None],
    budgets: Budgets = Budgets(),
    sampling: SamplingParams = SamplingParams(),
    jobs: int = 4,
    samples: int = 1,
) -> List[Transcript]:
    """Run ``samples`` sessions per ``(id, prompt)`` concurrently; results keep input order."""
    surfaces = _cue_surfaces(cue_set)
    work = [(i, pid, prompt, s) for i, (pid, prompt) in enumerate(prompts) for s in range(samples)]

    def one(pid: str, prompt: str, sample_index: int) -> Transcript:
        session = start_session(prompt, surfaces, budgets, sampling.with_seed(sample_seed(pid, sample_index)))
        return run(session, large_client, small_client)

    results: Dict[Tuple[int, int], Transcript] = {}
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as executor:
        futures = {executor.submit(one, pid, prompt, s): (i, s) for i, pid, prompt, s in work}
        for future in as_completed(futures):
            results[futures[future]] = future.result()
    return [results[key] for key in sorted(results)]
