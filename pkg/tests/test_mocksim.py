from dataclasses import replace

import numpy as np
import pytest

from relay_switch.client import SamplingParams, StopKind, StopReason
from relay_switch.errors import BadCostModel, BadRequest, ConfigError, EmptyTranscript, ScriptMiss
from relay_switch.mocksim import (
    CostModel,
    GenerateRequest,
    Script,
    ScriptedBackend,
    SpecDecodeProfile,
    dump_script,
    load_script,
    segments_from_attribution,
    serve_generate,
    serve_rescore,
    simulate_latency,
    spec_only_latency,
)
from relay_switch.records import THINK_END, Model

L, S = Model.LARGE, Model.SMALL


def _script(*paths, margin=0.8):
    return Script.from_surfaces('m', [list(p) for p in paths], margin=margin)


def test_generate_stops_on_surface_and_counts_prompt_tokens():
    script = _script(['a', ' So', ' b', '.'])
    result = serve_generate(script, GenerateRequest(prompt='a', stop=('So',), max_tokens=8))
    assert [t.text for t in result.tokens] == [' So']
    assert result.stop_reason == StopReason.stop_surface('So')
    assert result.usage.prompt_tokens == 1


def test_generate_resumes_inside_a_token():
    script = _script(['a', ' So', ' b', '.'])
    result = serve_generate(script, GenerateRequest(prompt='a S', stop=('So',), max_tokens=2))
    assert [t.text for t in result.tokens] == ['o', ' b']
    assert result.stop_reason.kind is StopKind.MAX_TOKENS
    assert result.usage.prompt_tokens == 2


def test_generate_runs_to_end_of_sequence():
    script = _script(['a', ' b', '.'])
    result = serve_generate(script, GenerateRequest(prompt='a', max_tokens=8))
    assert result.stop_reason.kind is StopKind.END_OF_SEQUENCE
    assert ''.join(t.text for t in result.tokens) == ' b.'


def test_stop_matching_is_a_plain_substring_match():
    script = _script(['a', ' know', ' more'])
    result = serve_generate(script, GenerateRequest(prompt='a', stop=('now',), max_tokens=8))
    assert result.stop_reason == StopReason.stop_surface('now')
    assert [t.text for t in result.tokens] == [' know']


def test_think_end_wins_over_other_stops():
    script = _script(['a', ' So' + THINK_END, ' b'])
    result = serve_generate(script, GenerateRequest(prompt='a', stop=('So', THINK_END), max_tokens=8))
    assert result.stop_reason == StopReason.stop_surface(THINK_END)


def test_longest_stop_wins():
    script = _script(['a', ' Wait,', ' b'])
    result = serve_generate(script, GenerateRequest(prompt='a', stop=('Wait', 'Wait,'), max_tokens=8))
    assert result.stop_reason == StopReason.stop_surface('Wait,')


def test_stripped_stop_is_restored_by_backend():
    script = _script(['a', ' b', ' So', 'x'])
    raw = serve_generate(script, GenerateRequest(prompt='a', stop=('So',), max_tokens=8, include_stop_str=False))
    assert [t.text for t in raw.tokens] == [' b', ' ']

    backend = ScriptedBackend(script, strip_stop=True)
    result = backend.generate('a', ['So'], 8)
    assert result.text == ' b So'
    assert result.tokens[-1].synthetic


def test_generate_rejects_bad_requests():
    script = _script(['a', ' b'])
    with pytest.raises(ScriptMiss):
        serve_generate(script, GenerateRequest(prompt='zzz'))
    with pytest.raises(BadRequest):
        serve_generate(script, GenerateRequest(prompt='a', max_tokens=0))


def test_seed_selects_among_matching_paths():
    script = _script(['p', 'A'], ['p', 'B'])
    backend = ScriptedBackend(script)
    assert backend.generate('p', [], 4).text == 'A'
    assert backend.generate('p', [], 4, SamplingParams(seed=1)).text == 'B'
    assert backend.generate('p', [], 4, SamplingParams(seed=2)).text == 'A'


def test_rescore_first_position_is_synthetic():
    script = _script(['Q', ':', ' x', ' y'], margin=0.4)
    records = serve_rescore(script, 'Q: x')
    assert [r.text for r in records] == ['Q', ':', ' x']
    assert records[0].synthetic
    assert records[1].top_probs[0][1] == pytest.approx(0.7)
    with pytest.raises(ScriptMiss):
        serve_rescore(script, 'nope')
    with pytest.raises(BadRequest):
        serve_rescore(script, '')


def test_script_rejects_two_think_ends():
    with pytest.raises(ConfigError):
        _script(['a', THINK_END, 'b', THINK_END])
    with pytest.raises(ConfigError):
        Script(model_id='m', paths=())


def test_backend_tracks_calls_and_simulated_time():
    script = Script.from_surfaces('m', [['a', ' b', ' c']], per_token_latency=0.5)
    backend = ScriptedBackend(script)
    backend.generate('a', [], 8)
    backend.rescore('a b')
    assert [c['kind'] for c in backend.call_history] == ['generate', 'rescore']
    assert backend.simulated_seconds == pytest.approx(1.0)
    backend.reset()
    assert list(backend.call_history) == []


def test_backend_history_keeps_most_recent_calls():
    backend = ScriptedBackend(Script.from_surfaces('m', [['a', ' b', ' c']]), history_limit=2)
    for prompt in ('a', 'a b', 'a b c'):
        backend.rescore(prompt)
    assert [c['prompt'] for c in backend.call_history] == ['a b', 'a b c']
    backend.close()
    assert not backend.call_history


def test_dump_and_load_script(tmp_path):
    script = Script.from_surfaces('small-x', [['a', ' b'], ['a', ' c']], per_token_latency=0.01)
    path = tmp_path / 'small.jsonl'
    dump_script(script, path)
    loaded = load_script(path)
    assert loaded.model_id == 'small-x'
    assert loaded.per_token_latency == pytest.approx(0.01)
    assert [p.text for p in loaded.paths] == ['a b', 'a c']
    assert load_script(path, model_id='override').model_id == 'override'


def test_load_script_rejects_bad_lines(tmp_path):
    broken = tmp_path / 'broken.jsonl'
    broken.write_text('{"surface": "a"\n', encoding='utf-8')
    with pytest.raises(ConfigError):
        load_script(broken)
    no_top = tmp_path / 'no_top.jsonl'
    no_top.write_text('{"surface": "a"}\n', encoding='utf-8')
    with pytest.raises(ConfigError):
        load_script(no_top)


# --- latency ------------------------------------------------------------------

def test_cost_model_validation():
    with pytest.raises(BadCostModel):
        CostModel(large_token_cost=0)
    with pytest.raises(BadCostModel):
        CostModel(switch_overhead=-1)
    with pytest.raises(BadCostModel):
        CostModel(small_token_cost=float('nan'))
    with pytest.raises(BadCostModel):
        SpecDecodeProfile(mean_accepted_span=0.5)
    with pytest.raises(BadCostModel):
        SpecDecodeProfile(mean_accepted_span=2, verify_cost=0)


def test_speedup_at_seventy_percent_utilization():
    attribution = [L] * 698 + [S] * 302
    report = simulate_latency(attribution, CostModel(large_token_cost=1.0, small_token_cost=0.25))
    assert report.total_latency == pytest.approx(773.5)
    assert report.speedup_vs_large_only == pytest.approx(1000 / 773.5)
    assert round(report.speedup_vs_large_only, 2) == 1.29
    assert report.switch_count == 1


def test_speculative_decoding_only():
    report = spec_only_latency(30, CostModel(), SpecDecodeProfile(mean_accepted_span=3))
    assert report.total_latency == pytest.approx(10.0)
    assert report.speedup_vs_large_only == pytest.approx(3.0)
    assert report.switch_count == 0


def test_switch_overhead_and_prefill_are_charged_on_switch_in():
    cost = CostModel(large_token_cost=1.0, small_token_cost=0.25, switch_overhead=0.5, prefill_token_cost=0.1)
    report = simulate_latency([L, L, S, S, S, L], cost)
    assert report.switch_count == 2
    assert report.per_model_breakdown['large'] == pytest.approx(3.3)
    assert report.per_model_breakdown['small'] == pytest.approx(0.95)
    assert report.per_model_breakdown['switches'] == pytest.approx(1.0)
    assert report.total_latency == pytest.approx(5.25)


def test_empty_attribution_is_rejected():
    with pytest.raises(EmptyTranscript):
        simulate_latency([], CostModel())
    with pytest.raises(BadCostModel):
        simulate_latency([L], CostModel(), segments=[(L, 0)])


def _oracle_total(attribution, cost):
    total = 0.0
    last_held = {L: 0, S: 0}
    for i, model in enumerate(attribution):
        if i and model is not attribution[i - 1]:
            total += cost.switch_overhead + (i - last_held[model]) * cost.prefill_token_cost
        total += cost.decode_cost(model)
        last_held[model] = i + 1
    return total


def test_latency_matches_token_level_oracle():
    rng = np.random.default_rng(5)
    cost = CostModel(large_token_cost=1.0, small_token_cost=0.3, switch_overhead=0.7, prefill_token_cost=0.05)
    for _ in range(200):
        attribution = [L if rng.random() < 0.6 else S for _ in range(int(rng.integers(1, 60)))]
        report = simulate_latency(attribution, cost)
        switches = sum(1 for a, b in zip(attribution, attribution[1:]) if a is not b)
        assert report.switch_count == switches
        assert report.total_latency == pytest.approx(_oracle_total(attribution, cost))


COST_FIELDS = ('large_token_cost', 'small_token_cost', 'switch_overhead', 'prefill_token_cost')


@pytest.mark.parametrize('field', COST_FIELDS)
def test_latency_never_falls_when_a_cost_rises(field):
    rng = np.random.default_rng(COST_FIELDS.index(field))
    for _ in range(100):
        attribution = [L if rng.random() < 0.6 else S for _ in range(int(rng.integers(1, 50)))]
        cost = CostModel(float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.05, 0.5)),
                         float(rng.uniform(0.0, 1.0)), float(rng.uniform(0.0, 0.1)))
        dearer = replace(cost, **{field: getattr(cost, field) + float(rng.uniform(0.0, 1.0))})
        assert simulate_latency(attribution, dearer).total_latency >= simulate_latency(attribution, cost).total_latency


def test_equal_token_costs_without_overhead_give_no_speedup():
    rng = np.random.default_rng(8)
    for _ in range(100):
        attribution = [L if rng.random() < 0.5 else S for _ in range(int(rng.integers(1, 50)))]
        per_token = float(rng.uniform(0.1, 3.0))
        report = simulate_latency(attribution, CostModel(per_token, per_token))
        assert report.speedup_vs_large_only == pytest.approx(1.0)


def test_fragmenting_large_segments_never_helps_speculation():
    rng = np.random.default_rng(17)
    cost = CostModel()
    profile = SpecDecodeProfile(mean_accepted_span=3)
    for _ in range(200):
        attribution = [L if rng.random() < 0.7 else S for _ in range(int(rng.integers(1, 80)))]
        merged = segments_from_attribution(attribution)
        fragmented = []
        for model, length in merged:
            fragmented.extend([(model, 1)] * length if model is L else [(model, length)])
        whole = simulate_latency(attribution, cost, profile)
        split = simulate_latency(attribution, cost, profile, segments=fragmented)
        assert split.total_latency >= whole.total_latency - 1e-9
        assert split.switch_count == whole.switch_count
