"""
OpenAI-compatible completions adapter.

Sends generation and echo-rescoring requests with stop sequences and top-k
logprobs, retries transient failures with jittered exponential backoff, and
normalizes responses into TokenRecords.
"""
from __future__ import annotations

import logging
import math
import os
import random
import threading
import time
import uuid
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import requests

from .errors import (
    BadRequest,
    ConfigError,
    EndpointError,
    MalformedResponse,
    ModelNotFound,
    UnsupportedCapability,
)
from .records import TokenRecord

logger = logging.getLogger(__name__)

ENV_URL = {'large': 'RELAYGEN_LARGE_URL', 'small': 'RELAYGEN_SMALL_URL'}
ENV_MODEL = {'large': 'RELAYGEN_LARGE_MODEL', 'small': 'RELAYGEN_SMALL_MODEL'}
ENV_API_KEY = 'RELAYGEN_API_KEY'

COMPLETIONS_PATH = '/v1/completions'
MODELS_PATH = '/v1/models'


class StopKind(str, Enum):
    STOP_SURFACE = 'stop_surface'
    MAX_TOKENS = 'max_tokens'
    END_OF_SEQUENCE = 'end_of_sequence'


@dataclass(frozen=True)
class StopReason:
    kind: StopKind
    surface: Optional[str] = None

    @classmethod
    def stop_surface(cls, surface: str) -> 'StopReason':
        return cls(StopKind.STOP_SURFACE, surface)

    @classmethod
    def max_tokens(cls) -> 'StopReason':
        return cls(StopKind.MAX_TOKENS)

    @classmethod
    def end_of_sequence(cls) -> 'StopReason':
        return cls(StopKind.END_OF_SEQUENCE)

    def to_dict(self) -> dict:
        return {'kind': self.kind.value, 'surface': self.surface}

    def __str__(self) -> str:
        if self.kind is StopKind.STOP_SURFACE:
            return f"stop({self.surface!r})"
        return self.kind.value


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class GenerateResult:
    tokens: Tuple[TokenRecord, ...]
    stop_reason: StopReason
    usage: Usage = Usage()

    @property
    def text(self) -> str:
        return ''.join(t.text for t in self.tokens)


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.6
    top_p: float = 0.95
    top_k: int = 20
    seed: Optional[int] = None

    def with_seed(self, seed: Optional[int]) -> 'SamplingParams':
        return replace(self, seed=seed)

    def to_payload(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {
            'temperature': self.temperature,
            'top_p': self.top_p,
            'top_k': self.top_k,
        }
        if self.seed is not None:
            payload['seed'] = self.seed
        return payload


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_id: str
    api_key: Optional[str] = None
    timeout: float = 60.0
    max_retries: int = 3
    logprobs_top_k: int = 5
    include_stop_str: bool = True
    backoff_base: float = 0.25
    backoff_factor: float = 2.0
    backoff_cap: float = 8.0

    def __post_init__(self) -> None:
        if not self.base_url:
            raise ConfigError('endpoint base_url is empty')
        if not self.model_id:
            raise ConfigError('endpoint model_id is empty')
        if self.logprobs_top_k < 2:
            raise ConfigError(f"logprobs_top_k must be >= 2, got {self.logprobs_top_k}")
        if self.max_retries < 0:
            raise ConfigError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.timeout <= 0:
            raise ConfigError(f"timeout must be positive, got {self.timeout}")

    @classmethod
    def from_env(cls, role: str, model_id: Optional[str] = None,
                 env: Optional[Mapping[str, str]] = None) -> 'EndpointConfig':
        env = os.environ if env is None else env
        url = env.get(ENV_URL[role], '')
        if not url:
            raise ConfigError(f"{ENV_URL[role]} is not set")
        return cls(
            base_url=url,
            model_id=model_id or env.get(ENV_MODEL[role], role),
            api_key=env.get(ENV_API_KEY) or None,
        )

    @classmethod
    def from_settings(cls, role: str, settings: Mapping[str, Any]) -> 'EndpointConfig':
        """Build from resolved settings (keys like ``large_url``, ``timeout``)."""
        url = settings.get(f'{role}_url')
        if not url:
            raise ConfigError(f"no URL configured for the {role} model (--{role}-url or {ENV_URL[role]})")
        return cls(
            base_url=str(url),
            model_id=str(settings.get(f'{role}_model') or role),
            api_key=settings.get('api_key') or None,
            timeout=float(settings.get('timeout', 60.0)),
            max_retries=int(settings.get('max_retries', 3)),
            logprobs_top_k=int(settings.get('logprobs_top_k', 5)),
        )


class CompletionBackend(Protocol):
    """What the switcher, calibration and evaluation code need from a model."""

    @property
    def model_id(self) -> str: ...

    def generate(self, prompt_text: str, stop_surfaces: Sequence[str], max_tokens: int,
                 sampling: SamplingParams) -> GenerateResult: ...

    def rescore(self, full_text: str) -> List[TokenRecord]: ...

    def health_check(self) -> Dict[str, Any]: ...

    def close(self) -> None: ...


# --- response normalization ---------------------------------------------------

def top_from_logprobs(entry: Mapping[str, float]) -> Tuple[Tuple[str, float], ...]:
    pairs = [(str(surface), min(1.0, math.exp(float(lp)))) for surface, lp in entry.items()]
    pairs.sort(key=lambda pair: (-pair[1], pair[0]))
    return tuple(pairs)


def stop_surface_present(tokens: Sequence[TokenRecord], surface: str) -> bool:
    """True if ``surface`` ends inside the last returned token."""
    if not tokens:
        return False
    text = ''.join(t.text for t in tokens)
    tail = text[-(len(tokens[-1].text) + len(surface)):]
    return surface in tail


def ensure_stop_surface(tokens: Sequence[TokenRecord], stop_reason: StopReason) -> Tuple[TokenRecord, ...]:
    """Re-append a stripped stop surface as one synthetic record; renumber positions."""
    out = [t.at(i) for i, t in enumerate(tokens)]
    if stop_reason.kind is StopKind.STOP_SURFACE and not stop_surface_present(out, stop_reason.surface):
        out.append(TokenRecord.synthetic_stop(stop_reason.surface, position=len(out)))
    return tuple(out)


def map_stop_reason(choice: Mapping[str, Any], text: str, requested_stops: Sequence[str]) -> StopReason:
    finish = choice.get('finish_reason')
    if finish == 'length':
        return StopReason.max_tokens()
    if finish != 'stop':
        raise MalformedResponse(f"unexpected finish_reason: {finish!r}")
    if 'stop_reason' in choice:
        matched = choice.get('stop_reason')
        if isinstance(matched, str) and matched:
            return StopReason.stop_surface(matched)
        # null or an EOS token id
        return StopReason.end_of_sequence()
    # servers without the stop_reason extension: recover the surface from the text tail
    for surface in sorted(requested_stops, key=len, reverse=True):
        if surface and text.endswith(surface):
            return StopReason.stop_surface(surface)
    return StopReason.end_of_sequence()


def parse_generation(payload: Mapping[str, Any], requested_stops: Sequence[str]) -> GenerateResult:
    try:
        choice = payload['choices'][0]
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"response has no choices: {exc}") from exc
    logprobs = choice.get('logprobs')
    if not logprobs or 'tokens' not in logprobs or 'top_logprobs' not in logprobs:
        raise MalformedResponse('response carries no logprobs')
    surfaces = logprobs['tokens'] or []
    tops = logprobs['top_logprobs'] or []
    if len(surfaces) != len(tops):
        raise MalformedResponse(f"{len(surfaces)} tokens but {len(tops)} top_logprobs entries")

    tokens: List[TokenRecord] = []
    for i, (surface, top) in enumerate(zip(surfaces, tops)):
        if not top:
            raise MalformedResponse(f"token {i} has no top_logprobs")
        tokens.append(TokenRecord(text=str(surface), top_probs=top_from_logprobs(top), position=i))

    text = choice.get('text')
    if text is None:
        text = ''.join(t.text for t in tokens)
    stop_reason = map_stop_reason(choice, text, requested_stops)

    usage = payload.get('usage') or {}
    return GenerateResult(
        tokens=ensure_stop_surface(tokens, stop_reason),
        stop_reason=stop_reason,
        usage=Usage(
            prompt_tokens=int(usage.get('prompt_tokens') or 0),
            completion_tokens=int(usage.get('completion_tokens') or len(tokens)),
        ),
    )


def parse_rescore(payload: Mapping[str, Any], full_text: str) -> List[TokenRecord]:
    try:
        choice = payload['choices'][0]
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"response has no choices: {exc}") from exc
    logprobs = choice.get('logprobs')
    if not logprobs or not logprobs.get('tokens') or 'top_logprobs' not in logprobs:
        raise UnsupportedCapability('endpoint did not return prompt logprobs for an echo request')

    records: List[TokenRecord] = []
    consumed = 0
    for i, (surface, top) in enumerate(zip(logprobs['tokens'], logprobs['top_logprobs'])):
        if consumed >= len(full_text):
            # the generated continuation after the echoed prompt
            break
        surface = str(surface)
        if top:
            records.append(TokenRecord(text=surface, top_probs=top_from_logprobs(top), position=i))
        elif i == 0:
            # first position has no conditional distribution
            records.append(TokenRecord.synthetic_stop(surface, position=i))
        else:
            raise MalformedResponse(f"echoed token {i} has no top_logprobs")
        consumed += len(surface)
    return records


class EndpointClient:
    """HTTP client for one OpenAI-compatible completions endpoint.

    Safe to share between sessions: each thread gets its own ``requests.Session``.
    """

    def __init__(self, cfg: EndpointConfig, sleep: Callable[[float], None] = time.sleep) -> None:
        self.cfg = cfg
        self._sleep = sleep
        self._local = threading.local()
        self._sessions: List[requests.Session] = []
        self._sessions_lock = threading.Lock()
        self._rng = random.Random()
        logger.debug(f"[{cfg.model_id}] top_k is sent as a non-standard extension; servers may ignore it")

    @property
    def model_id(self) -> str:
        return self.cfg.model_id

    def _http(self) -> requests.Session:
        session = getattr(self._local, 'session', None)
        if session is None:
            session = requests.Session()
            self._local.session = session
            with self._sessions_lock:
                self._sessions.append(session)
        return session

    def close(self) -> None:
        """Close every thread's HTTP session; later calls open fresh ones."""
        with self._sessions_lock:
            sessions, self._sessions = self._sessions, []
            self._local = threading.local()
        for session in sessions:
            session.close()

    def __enter__(self) -> 'EndpointClient':
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self.close()

    def _headers(self, request_id: str) -> Dict[str, str]:
        headers = {'X-Request-Id': request_id}
        if self.cfg.api_key:
            headers['Authorization'] = f"Bearer {self.cfg.api_key}"
        return headers

    def backoff_delay(self, attempt: int) -> float:
        delay = min(self.cfg.backoff_cap, self.cfg.backoff_base * self.cfg.backoff_factor ** (attempt - 1))
        return delay * self._rng.uniform(0.5, 1.0)

    def _request(self, method: str, path: str, payload: Optional[dict] = None) -> requests.Response:
        url = f"{self.cfg.base_url.rstrip('/')}{path}"
        request_id = uuid.uuid4().hex
        attempts = self.cfg.max_retries + 1
        last_error = ''
        for attempt in range(1, attempts + 1):
            try:
                response = self._http().request(
                    method, url, json=payload, headers=self._headers(request_id), timeout=self.cfg.timeout
                )
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_error = f"{type(exc).__name__}: {exc}"
            else:
                if response.status_code != 429 and response.status_code < 500:
                    if attempt > 1:
                        logger.info(f"[{self.cfg.model_id}] {method} {path} succeeded after {attempt} attempts")
                    return response
                last_error = f"HTTP {response.status_code}: {response.text[:200]}"
            if attempt < attempts:
                delay = self.backoff_delay(attempt)
                logger.debug(
                    f"[{self.cfg.model_id}] {method} {path} ({request_id}) attempt {attempt}/{attempts} "
                    f"failed: {last_error}, retrying in {delay:.2f}s"
                )
                self._sleep(delay)
        logger.warning(f"[{self.cfg.model_id}] {method} {path} failed after {attempts} attempts: {last_error}")
        raise EndpointError(f"{method} {url} failed after {attempts} attempts: {last_error}")

    @staticmethod
    def _json(response: requests.Response) -> Any:
        try:
            return response.json()
        except ValueError as exc:
            raise MalformedResponse(f"non-JSON response body: {response.text[:200]}") from exc

    def generate(self, prompt_text: str, stop_surfaces: Sequence[str], max_tokens: int,
                 sampling: SamplingParams = SamplingParams()) -> GenerateResult:
        if max_tokens < 1:
            raise BadRequest(f"max_tokens must be >= 1, got {max_tokens}")
        stops = list(stop_surfaces)
        payload: Dict[str, Any] = {
            'model': self.cfg.model_id,
            'prompt': prompt_text,
            'max_tokens': max_tokens,
            'logprobs': self.cfg.logprobs_top_k,
            'include_stop_str_in_output': self.cfg.include_stop_str,
            **sampling.to_payload(),
        }
        if stops:
            payload['stop'] = stops
        response = self._request('POST', COMPLETIONS_PATH, payload)
        if response.status_code == 404:
            raise ModelNotFound(f"model {self.cfg.model_id!r} not served at {self.cfg.base_url}")
        if response.status_code >= 400:
            raise EndpointError(f"generation rejected with HTTP {response.status_code}: {response.text[:200]}")
        result = parse_generation(self._json(response), stops)
        logger.debug(
            f"[{self.cfg.model_id}] generated {len(result.tokens)} tokens, {result.stop_reason}"
        )
        return result

    def rescore(self, full_text: str) -> List[TokenRecord]:
        if not full_text:
            raise BadRequest('cannot rescore empty text')
        payload = {
            'model': self.cfg.model_id,
            'prompt': full_text,
            'max_tokens': 1,
            'temperature': 0.0,
            'echo': True,
            'logprobs': self.cfg.logprobs_top_k,
        }
        response = self._request('POST', COMPLETIONS_PATH, payload)
        if response.status_code in (400, 422):
            raise UnsupportedCapability(
                f"{self.cfg.base_url} rejected echo rescoring: HTTP {response.status_code} {response.text[:200]}"
            )
        if response.status_code == 404:
            raise ModelNotFound(f"model {self.cfg.model_id!r} not served at {self.cfg.base_url}")
        if response.status_code >= 400:
            raise EndpointError(f"rescore rejected with HTTP {response.status_code}: {response.text[:200]}")
        return parse_rescore(self._json(response), full_text)

    def health_check(self) -> Dict[str, Any]:
        response = self._request('GET', MODELS_PATH)
        if response.status_code >= 400:
            raise EndpointError(f"model listing failed with HTTP {response.status_code}")
        listing = self._json(response)
        models = listing.get('data', []) if isinstance(listing, dict) else []
        for entry in models:
            if entry.get('id') == self.cfg.model_id:
                return dict(entry)
        served = ', '.join(str(m.get('id')) for m in models) or 'none'
        raise ModelNotFound(f"model {self.cfg.model_id!r} not found at {self.cfg.base_url} (served: {served})")


def generate(cfg: EndpointConfig, prompt_text: str, stop_surfaces: Sequence[str], max_tokens: int,
             sampling: SamplingParams = SamplingParams()) -> GenerateResult:
    with EndpointClient(cfg) as client:
        return client.generate(prompt_text, stop_surfaces, max_tokens, sampling)


def rescore(cfg: EndpointConfig, full_text: str) -> List[TokenRecord]:
    with EndpointClient(cfg) as client:
        return client.rescore(full_text)


def health_check(cfg: EndpointConfig) -> Dict[str, Any]:
    with EndpointClient(cfg) as client:
        return client.health_check()
