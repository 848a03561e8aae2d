import json

import pytest

from shared.lung.dynamics import iso_setting
from shared.storage.artifact_store import CURVE_HEADER, SCORES_HEADER, ArtifactStore, format_value

pytestmark = pytest.mark.storage


def test_format_value_is_exact():
    assert format_value(None) == ''
    assert format_value(0.1) == '0.1'
    assert float(format_value(1 / 3)) == 1 / 3
    assert format_value(float('inf')) == 'inf'
    assert format_value(7) == '7'


def test_layout(tmp_path):
    store = ArtifactStore(tmp_path)
    setting = iso_setting(20, 10)
    assert store.dataset_path(setting) == tmp_path / 'R20_C10' / 'dataset.jsonl'
    assert store.policy_path(setting).name == 'policy.json'
    assert store.policy_path(setting, suffix='lam0.1').name == 'policy_lam0.1.json'
    assert store.grid_table_path(setting).name == 'grid_20_10.csv'


def test_csv_round_trip(tmp_path):
    store = ArtifactStore(tmp_path / 'out')
    rows = [['performance', 'R5_C50', 'pid', None, 1.25, 'abc', 0]]
    path = store.write_csv('scores.csv', SCORES_HEADER, rows)
    assert path.read_text(encoding='utf-8').splitlines()[0] == ','.join(SCORES_HEADER)
    loaded = store.read_csv('scores.csv')
    assert loaded == [dict(zip(SCORES_HEADER, ['performance', 'R5_C50', 'pid', '', '1.25', 'abc', '0']))]
    with pytest.raises(ValueError):
        store.write_csv('bad.csv', CURVE_HEADER, [[1, 2, 3]])


def test_curve_and_open_loop_files(tmp_path):
    store = ArtifactStore(tmp_path)
    setting = iso_setting(5, 50)
    curve = store.write_curve('analytic', setting, [(0, 3.5), (6, 2.0)])
    assert curve.name == 'curve_analytic_5_50.csv'
    assert store.read_csv(curve.name) == [{'episode': '0', 'score': '3.5'}, {'episode': '6', 'score': '2.0'}]
    open_loop = store.write_open_loop(setting, [0.5, 0.75])
    assert [r['step'] for r in store.read_csv(open_loop.name)] == ['1', '2']


def test_json_is_stable(tmp_path):
    store = ArtifactStore(tmp_path)
    a = store.write_json(tmp_path / 'a.json', {'b': 1, 'a': [1.5]})
    b = store.write_json(tmp_path / 'b.json', {'a': [1.5], 'b': 1})
    assert a.read_bytes() == b.read_bytes()
    manifest = store.write_run_manifest({'seed': 3}, 'deadbeef0000', 'benchmark', {'n_scores': 2})
    assert json.loads(manifest.read_text(encoding='utf-8')) == {
        'config': {'seed': 3}, 'config_hash': 'deadbeef0000', 'stage': 'benchmark', 'n_scores': 2}
