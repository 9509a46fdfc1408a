import json
import math

import pytest
import requests

from relay_switch.client import (
    EndpointClient,
    EndpointConfig,
    SamplingParams,
    StopKind,
    StopReason,
    ensure_stop_surface,
    map_stop_reason,
    parse_generation,
    parse_rescore,
)
from relay_switch.errors import ConfigError, EndpointError, MalformedResponse, ModelNotFound, UnsupportedCapability
from relay_switch.records import THINK_END, TokenRecord
from tests.helpers import TWO_CUE_BODY, TWO_CUE_PROMPT, two_cue_script


def _choice(tokens, tops, finish='stop', **extra):
    return {
        'choices': [{
            'text': ''.join(tokens),
            'finish_reason': finish,
            'logprobs': {'tokens': tokens, 'top_logprobs': tops},
            **extra,
        }],
        'usage': {'prompt_tokens': 7, 'completion_tokens': len(tokens)},
    }


def _top(surface, p=0.9):
    return {surface: math.log(p), '<alt>': math.log(1 - p)}


def test_endpoint_config_validation():
    with pytest.raises(ConfigError):
        EndpointConfig(base_url='', model_id='m')
    with pytest.raises(ConfigError):
        EndpointConfig(base_url='http://x', model_id='m', logprobs_top_k=1)
    with pytest.raises(ConfigError):
        EndpointConfig.from_env('large', env={})


def test_endpoint_config_from_env():
    env = {'RELAYGEN_LARGE_URL': 'http://gpu:8000', 'RELAYGEN_LARGE_MODEL': 'big', 'RELAYGEN_API_KEY': 'k'}
    cfg = EndpointConfig.from_env('large', env=env)
    assert (cfg.base_url, cfg.model_id, cfg.api_key) == ('http://gpu:8000', 'big', 'k')


def test_sampling_payload_defaults():
    assert SamplingParams().to_payload() == {'temperature': 0.6, 'top_p': 0.95, 'top_k': 20}
    assert SamplingParams().with_seed(3).to_payload()['seed'] == 3


def test_parse_generation_with_stop_reason_extension():
    payload = _choice([' Let', ' me', ' Wait'], [_top(' Let'), _top(' me'), _top(' Wait')], stop_reason='Wait')
    result = parse_generation(payload, ['Wait', THINK_END])
    assert result.stop_reason == StopReason.stop_surface('Wait')
    assert [t.text for t in result.tokens] == [' Let', ' me', ' Wait']
    assert result.tokens[0].top_probs[0] == (' Let', pytest.approx(0.9))
    assert result.usage.prompt_tokens == 7


def test_parse_generation_appends_stripped_stop():
    payload = _choice([' it', ' holds'], [_top(' it'), _top(' holds')], stop_reason='.')
    result = parse_generation(payload, ['.', '?'])
    assert result.text == ' it holds.'
    assert result.tokens[-1].synthetic
    assert result.tokens[-1].position == 2
    assert result.tokens[-1].top_probs == (('.', 1.0), ('', 0.0))


def test_map_stop_reason_variants():
    assert map_stop_reason({'finish_reason': 'length'}, 'x', []).kind is StopKind.MAX_TOKENS
    assert map_stop_reason({'finish_reason': 'stop', 'stop_reason': None}, 'x', ['.']).kind is StopKind.END_OF_SEQUENCE
    assert map_stop_reason({'finish_reason': 'stop', 'stop_reason': 151643}, 'x', []).kind is StopKind.END_OF_SEQUENCE
    # no extension: recovered from the text tail
    assert map_stop_reason({'finish_reason': 'stop'}, 'so Wait,', ['Wait', 'Wait,']) == StopReason.stop_surface('Wait,')
    with pytest.raises(MalformedResponse):
        map_stop_reason({'finish_reason': 'tool_calls'}, '', [])


def test_parse_generation_rejects_missing_logprobs():
    with pytest.raises(MalformedResponse):
        parse_generation({'choices': [{'text': 'x', 'finish_reason': 'stop'}]}, [])
    with pytest.raises(MalformedResponse):
        parse_generation({'choices': []}, [])


def test_parse_rescore_marks_first_position_synthetic():
    payload = _choice(['Q', ':', ' x', ' y'], [None, _top(':'), _top(' x'), _top(' y')], finish='length')
    records = parse_rescore(payload, 'Q: x')
    assert [r.text for r in records] == ['Q', ':', ' x']
    assert records[0].synthetic and not records[1].synthetic


def test_parse_rescore_without_prompt_logprobs_is_unsupported():
    with pytest.raises(UnsupportedCapability):
        parse_rescore({'choices': [{'text': 'x', 'logprobs': None}]}, 'x')


def test_ensure_stop_surface_keeps_included_stop():
    tokens = (TokenRecord(' So', (('So', 1.0), ('', 0.0))),)
    assert ensure_stop_surface(tokens, StopReason.stop_surface('So')) == (tokens[0].at(0),)


class _FakeHttp:
    """Replays a list of outcomes: an exception instance or (status, json body)."""

    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.calls = []

    def request(self, method, url, **kwargs):
        self.calls.append({'method': method, 'url': url, 'json': kwargs.get('json'), 'headers': kwargs.get('headers')})
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        status, body = outcome
        response = requests.Response()
        response.status_code = status
        response._content = json.dumps(body).encode('utf-8')
        return response


def _client(outcomes, **cfg):
    delays = []
    client = EndpointClient(EndpointConfig(base_url='http://mock', model_id='large', **cfg), sleep=delays.append)
    fake = _FakeHttp(outcomes)
    client._http = lambda: fake
    return client, fake, delays


def test_retries_transient_failures_with_backoff():
    ok = _choice([' a'], [_top(' a')], finish='length', stop_reason=None)
    client, fake, delays = _client([requests.ConnectionError('down'), (503, {}), (429, {}), (200, ok)])
    result = client.generate('p', [], 1)
    assert result.stop_reason.kind is StopKind.MAX_TOKENS
    assert len(fake.calls) == 4
    assert len(delays) == 3
    for attempt, delay in enumerate(delays, start=1):
        nominal = min(8.0, 0.25 * 2.0 ** (attempt - 1))
        assert 0.5 * nominal <= delay <= nominal
    # one request id across retries
    assert len({c['headers']['X-Request-Id'] for c in fake.calls}) == 1


def test_gives_up_after_max_retries():
    client, fake, delays = _client([(500, {})] * 3, max_retries=2)
    with pytest.raises(EndpointError):
        client.generate('p', [], 1)
    assert len(fake.calls) == 3
    assert len(delays) == 2


def test_client_errors_are_not_retried():
    client, fake, _ = _client([(404, {'detail': 'nope'})])
    with pytest.raises(ModelNotFound):
        client.generate('p', [], 1)
    assert len(fake.calls) == 1


def test_request_payload_and_auth_header():
    ok = _choice([' a'], [_top(' a')], finish='length', stop_reason=None)
    client, fake, _ = _client([(200, ok)], api_key='secret')
    client.generate('prompt', ['.', THINK_END], 4, SamplingParams(seed=11))
    sent = fake.calls[0]
    assert sent['url'] == 'http://mock/v1/completions'
    assert sent['headers']['Authorization'] == 'Bearer secret'
    assert sent['json']['stop'] == ['.', THINK_END]
    assert sent['json']['include_stop_str_in_output'] is True
    assert sent['json']['logprobs'] == 5
    assert sent['json']['seed'] == 11
    assert json.dumps(sent['json'])


def test_rescore_rejection_is_unsupported_capability():
    client, _, _ = _client([(400, {'detail': 'echo not supported'})])
    with pytest.raises(UnsupportedCapability):
        client.rescore('some text')


def test_against_mock_server(serve_script):
    url = serve_script(two_cue_script('large'))
    client = EndpointClient(EndpointConfig(base_url=url, model_id='large'))
    assert client.health_check()['id'] == 'large'

    result = client.generate(TWO_CUE_PROMPT, ['So', THINK_END], 32)
    assert result.text == ''.join(TWO_CUE_BODY[:5])
    assert result.stop_reason == StopReason.stop_surface('So')
    assert result.usage.prompt_tokens == 4

    records = client.rescore(TWO_CUE_PROMPT + ' Let me')
    assert records[0].synthetic
    assert ''.join(r.text for r in records) == TWO_CUE_PROMPT + ' Let me'
    assert records[-1].top_probs[0][1] == pytest.approx(0.9)

    wrong = EndpointClient(EndpointConfig(base_url=url, model_id='other', max_retries=0))
    with pytest.raises(ModelNotFound):
        wrong.health_check()
    with pytest.raises(ModelNotFound):
        wrong.generate(TWO_CUE_PROMPT, [], 4)


def test_against_stop_stripping_server(serve_script):
    url = serve_script(two_cue_script('large'), strip_stop=True)
    client = EndpointClient(EndpointConfig(base_url=url, model_id='large'))
    result = client.generate(TWO_CUE_PROMPT, ['So', THINK_END], 32)
    assert result.text == ''.join(TWO_CUE_BODY[:5])
    assert result.tokens[-1].synthetic
    assert result.tokens[-1].text == 'So'


def test_script_miss_is_an_endpoint_error(serve_script):
    url = serve_script(two_cue_script('large'))
    client = EndpointClient(EndpointConfig(base_url=url, model_id='large', max_retries=0))
    with pytest.raises(EndpointError) as info:
        client.generate('not in the script', [], 4)
    assert '409' in str(info.value)


def test_repeated_generation_is_identical_and_close_reopens(serve_script):
    url = serve_script(two_cue_script('large'))
    with EndpointClient(EndpointConfig(base_url=url, model_id='large')) as client:
        first = client.generate(TWO_CUE_PROMPT, ['So', THINK_END], 32)
        assert client.generate(TWO_CUE_PROMPT, ['So', THINK_END], 32) == first
        assert len(client._sessions) == 1
    assert client._sessions == []
    assert client.generate(TWO_CUE_PROMPT, ['So', THINK_END], 32) == first
    client.close()
