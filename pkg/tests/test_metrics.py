import numpy as np
import pytest

from relay_switch.errors import EmptyInput, EmptyTranscript, MisalignedInputs
from relay_switch.metrics import CorpusSummary, aggregate, format_report, matching_rate, session_stats, utilization
from relay_switch.mocksim import ScriptedBackend
from relay_switch.records import Model
from relay_switch.switcher import run, start_session
from tests.helpers import CUE_SURFACES, TWO_CUE_PROMPT, two_cue_script

L, S = Model.LARGE, Model.SMALL


@pytest.mark.parametrize(
    'producers, expected',
    [
        ([L] * 10, 1.0),
        ([L] * 698 + [S] * 302, 0.698),
        ([S] * 4, 0.0),
        (['large', 'small'], 0.5),
    ],
)
def test_utilization(producers, expected):
    assert utilization(producers) == pytest.approx(expected)


def test_utilization_of_empty_transcript():
    with pytest.raises(EmptyTranscript):
        utilization([])


def test_session_stats_for_two_cue_session():
    transcript = run(start_session(TWO_CUE_PROMPT, CUE_SURFACES),
                     ScriptedBackend(two_cue_script('large')), ScriptedBackend(two_cue_script('small')))
    stats = session_stats(transcript)
    assert (stats.total_tokens, stats.large_tokens, stats.small_tokens) == (26, 11, 15)
    assert stats.utilization == pytest.approx(11 / 26)
    assert stats.switch_count_by_direction == {'large_to_small': 2, 'small_to_large': 2, 'to_answer_stage': 1}
    assert stats.prefill_tokens_by_model == {'large': 13, 'small': 15}
    assert stats.as_metrics()['switches'] == 5.0


def test_matching_rate_on_delegation_sized_set():
    reference = [str(i) for i in range(728)]
    delegated = list(reference)
    delegated[100] = '-1'
    rate = matching_rate(reference, delegated)
    assert rate == pytest.approx(727 / 728)
    assert abs(rate - 0.9986) < 1e-4


def test_matching_rate_absent_answers_never_match():
    assert matching_rate([None, '3'], [None, '3']) == pytest.approx(0.5)


def test_matching_rate_is_symmetric():
    rng = np.random.default_rng(3)
    choices = ('1', '2', '3', None)
    for _ in range(200):
        n = int(rng.integers(1, 30))
        first = [choices[int(i)] for i in rng.integers(0, len(choices), size=n)]
        second = [choices[int(i)] for i in rng.integers(0, len(choices), size=n)]
        assert matching_rate(first, second) == matching_rate(second, first)


def test_matching_rate_input_errors():
    with pytest.raises(MisalignedInputs):
        matching_rate(['1'], ['1', '2'])
    with pytest.raises(EmptyInput):
        matching_rate([], [])


def test_aggregate_uses_population_std():
    summary = aggregate([{'speedup': 1.0, 'utilization': 0.6}, {'speedup': 2.0, 'utilization': 0.8}])
    assert summary.n_sessions == 2
    assert summary.mean('speedup') == pytest.approx(1.5)
    assert summary.std('speedup') == pytest.approx(0.5)
    assert summary.mean('utilization') == pytest.approx(0.7)


def test_aggregate_single_session_has_zero_std():
    summary = aggregate([{'speedup': 1.3}])
    assert summary.std('speedup') == 0.0
    with pytest.raises(EmptyInput):
        aggregate([])


def test_format_report_columns():
    columns = {
        'switching': CorpusSummary(3, {'speedup': (1.29, 0.01), 'utilization': (0.698, 0.02)}),
        'spec-only': CorpusSummary(3, {'speedup': (2.0, 0.0)}),
    }
    table = format_report(columns)
    lines = table.splitlines()
    assert lines[0].split() == ['Metric', 'switching', 'spec-only']
    assert '1.29 ± 0.01' in lines[2] and '2.00 ± 0.00' in lines[2]
    assert '69.80 ± 2.00' in lines[3]
    assert lines[3].rstrip().endswith('-')
