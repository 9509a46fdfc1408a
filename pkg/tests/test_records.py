import json
import math

import numpy as np
import pandas as pd
import pytest

from relay_switch.errors import MalformedRecord
from relay_switch.outputs import clean_data_for_json, write_csv_atomic, write_json_atomic
from relay_switch.records import THINK_END, Model, TokenRecord, Trace, dump_trace_jsonl, load_trace_jsonl


def test_trace_jsonl_accepts_logprobs_and_synthetic_flag(tmp_path):
    path = tmp_path / 't1.jsonl'
    path.write_text(
        json.dumps({'text': 'Q', 'top': [['Q', 1.0], ['', 0.0]], 'synthetic': True}) + '\n'
        + json.dumps({'text': ' a', 'top_logprobs': [[' a', math.log(0.75)], [' b', math.log(0.25)]]}) + '\n',
        encoding='utf-8',
    )
    trace = load_trace_jsonl(path, source_model='small')
    assert trace.trace_id == 't1'
    assert trace.tokens[0].synthetic
    assert trace.tokens[1].position == 1
    assert trace.tokens[1].top_probs[0][1] == pytest.approx(0.75)

    copy = tmp_path / 'copy.jsonl'
    dump_trace_jsonl(trace, copy)
    first = json.loads(copy.read_text(encoding='utf-8').splitlines()[0])
    assert first == {'text': 'Q', 'top': [['Q', 1.0], ['', 0.0]], 'pos': 0, 'synthetic': True}


def test_trace_jsonl_reports_bad_lines(tmp_path):
    path = tmp_path / 'bad.jsonl'
    path.write_text('{"top": [["a", 1.0], ["", 0.0]]}\n', encoding='utf-8')
    with pytest.raises(MalformedRecord):
        load_trace_jsonl(path)
    path.write_text('{"text": "a"\n', encoding='utf-8')
    with pytest.raises(MalformedRecord):
        load_trace_jsonl(path)


def test_reasoning_end_and_offsets():
    trace = Trace.from_texts([' so', ' done', '</', 'think>', ' 5'])
    assert trace.reasoning_end == 2
    assert trace.offsets == (0, 3, 8, 10, 16)
    assert Trace.from_texts([' a', THINK_END]).reasoning_end == 1
    assert Trace.from_texts([' a', ' b']).reasoning_end == 2


def test_producers_must_cover_every_token():
    tokens = (TokenRecord('a', (('a', 1.0), ('', 0.0))),)
    assert Trace(tokens=tokens, producers=('large',)).producers == (Model.LARGE,)
    with pytest.raises(MalformedRecord):
        Trace(tokens=tokens, producers=())


def test_clean_data_for_json():
    payload = {'nan': float('nan'), 'inf': float('inf'), 'model': Model.SMALL, 'pair': ('a', 1),
               'np': np.float64(0.5), 3: 'key'}
    assert clean_data_for_json(payload) == {'nan': None, 'inf': None, 'model': 'small', 'pair': ['a', 1],
                                            'np': 0.5, '3': 'key'}


def test_atomic_writers(tmp_path):
    target = write_json_atomic(tmp_path / 'nested' / 'out.json', {'x': float('nan')})
    assert json.loads(target.read_text(encoding='utf-8')) == {'x': None}
    csv_path = write_csv_atomic(tmp_path / 'frame.csv', pd.DataFrame({'a': [1, 2]}))
    assert csv_path.read_text(encoding='utf-8') == 'a\n1\n2\n'
    assert sorted(p.name for p in tmp_path.rglob('*')) == ['frame.csv', 'nested', 'out.json']
