"""FastAPI app serving a mocksim Script over the OpenAI completions wire format."""
from __future__ import annotations

import logging
import math
from typing import Any, Dict, List, Optional, Sequence, Union

import uvicorn
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, ConfigDict

from .client import StopKind
from .errors import BadRequest, ScriptMiss
from .mocksim import GenerateRequest, Script, serve_generate, serve_rescore
from .records import TokenRecord

logger = logging.getLogger(__name__)

# logprob reported for zero-probability entries (exp underflows back to 0.0)
LOGPROB_FLOOR = -1e4
# returned when a prompt does not fit the script; kept apart from 400/404/422, which clients map to
# bad requests, unknown models and unsupported echo
SCRIPT_MISS_STATUS = 409


class CompletionRequest(BaseModel):
    model_config = ConfigDict(extra='allow')

    model: str
    prompt: str
    max_tokens: int = 16
    stop: Optional[Union[str, List[str]]] = None
    logprobs: Optional[int] = None
    echo: bool = False
    temperature: float = 1.0
    top_p: float = 1.0
    top_k: Optional[int] = None
    seed: Optional[int] = None
    include_stop_str_in_output: bool = False


def _logprob(prob: float) -> float:
    return math.log(prob) if prob > 0 else LOGPROB_FLOOR


def encode_top(record: TokenRecord, k: int) -> Dict[str, float]:
    top: Dict[str, float] = {}
    for surface, prob in record.top_probs[:k]:
        top.setdefault(surface, _logprob(prob))
    return top


def encode_logprobs(records: Sequence[TokenRecord], k: int, first_unscored: bool = False) -> Dict[str, Any]:
    tokens, token_logprobs, top_logprobs, offsets = [], [], [], []
    cursor = 0
    for i, record in enumerate(records):
        tokens.append(record.text)
        offsets.append(cursor)
        cursor += len(record.text)
        if first_unscored and i == 0:
            token_logprobs.append(None)
            top_logprobs.append(None)
            continue
        top = encode_top(record, k)
        token_logprobs.append(top.get(record.text, _logprob(record.top_probs[0][1])))
        top_logprobs.append(top)
    return {
        'tokens': tokens,
        'token_logprobs': token_logprobs,
        'top_logprobs': top_logprobs,
        'text_offset': offsets,
    }


def create_app(script: Script, strip_stop: bool = False) -> FastAPI:
    """``strip_stop`` mimics servers that always drop stop strings from the output."""
    app = FastAPI(title=f"mocksim: {script.model_id}")

    @app.get('/health')
    def health() -> Dict[str, str]:
        return {'status': 'ok', 'model': script.model_id}

    @app.get('/v1/models')
    def list_models() -> Dict[str, Any]:
        return {
            'object': 'list',
            'data': [{'id': script.model_id, 'object': 'model', 'owned_by': 'mocksim'}],
        }

    @app.post('/v1/completions')
    def completions(body: CompletionRequest) -> Dict[str, Any]:
        if body.model != script.model_id:
            raise HTTPException(status_code=404, detail=f"model {body.model!r} not found")
        k = body.logprobs or 1
        try:
            if body.echo:
                return _echo_response(script, body, k)
            return _generation_response(script, body, k, strip_stop)
        except ScriptMiss as exc:
            logger.warning(f"[mocksim:{script.model_id}] {exc}")
            raise HTTPException(status_code=SCRIPT_MISS_STATUS, detail=str(exc)) from exc
        except BadRequest as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    return app


def _generation_response(script: Script, body: CompletionRequest, k: int, strip_stop: bool) -> Dict[str, Any]:
    stops = [body.stop] if isinstance(body.stop, str) else list(body.stop or [])
    result = serve_generate(
        script,
        GenerateRequest(
            prompt=body.prompt,
            stop=tuple(stops),
            max_tokens=body.max_tokens,
            include_stop_str=body.include_stop_str_in_output and not strip_stop,
            seed=body.seed,
        ),
    )
    if result.stop_reason.kind is StopKind.MAX_TOKENS:
        finish_reason, stop_reason = 'length', None
    else:
        finish_reason, stop_reason = 'stop', result.stop_reason.surface
    choice: Dict[str, Any] = {
        'index': 0,
        'text': result.text,
        'finish_reason': finish_reason,
        'stop_reason': stop_reason,
    }
    if body.logprobs:
        choice['logprobs'] = encode_logprobs(result.tokens, k)
    return {
        'id': f"cmpl-mock-{script.model_id}",
        'object': 'text_completion',
        'model': script.model_id,
        'choices': [choice],
        'usage': {
            'prompt_tokens': result.usage.prompt_tokens,
            'completion_tokens': result.usage.completion_tokens,
            'total_tokens': result.usage.prompt_tokens + result.usage.completion_tokens,
        },
    }


def _echo_response(script: Script, body: CompletionRequest, k: int) -> Dict[str, Any]:
    if not body.logprobs:
        raise BadRequest('echo rescoring needs logprobs')
    records = serve_rescore(script, body.prompt)
    choice = {
        'index': 0,
        'text': body.prompt,
        'finish_reason': 'length',
        'stop_reason': None,
        'logprobs': encode_logprobs(records, k, first_unscored=True),
    }
    return {
        'id': f"cmpl-mock-{script.model_id}",
        'object': 'text_completion',
        'model': script.model_id,
        'choices': [choice],
        'usage': {'prompt_tokens': len(records), 'completion_tokens': 0, 'total_tokens': len(records)},
    }


def serve(script: Script, host: str = '127.0.0.1', port: int = 8000, strip_stop: bool = False,
          log_level: str = 'info') -> None:
    logger.info(f"Serving mock model {script.model_id!r} on http://{host}:{port} ({len(script.paths)} paths)")
    uvicorn.run(create_app(script, strip_stop=strip_stop), host=host, port=port, log_level=log_level.lower())
