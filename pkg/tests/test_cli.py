import json
from pathlib import Path

import pytest

from cli import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, parse_and_dispatch

pytestmark = pytest.mark.cli

SMOKE = str(Path(__file__).resolve().parent.parent / 'config' / 'smoke.json')


def test_help_exits_cleanly(capsys):
    assert parse_and_dispatch(['--help']) == EXIT_OK
    out = capsys.readouterr().out
    assert 'train-sim' in out and 'benchmark' in out


def test_unknown_subcommand_is_usage_error():
    assert parse_and_dispatch(['--config', SMOKE, 'fly']) != EXIT_OK


def test_missing_config_is_config_error(tmp_path):
    assert parse_and_dispatch(['collect']) == EXIT_CONFIG
    assert parse_and_dispatch(['--config', str(tmp_path / 'absent.json'), 'collect']) == EXIT_CONFIG


def test_bad_settings_filter_is_config_error(tmp_path):
    args = ['--config', SMOKE, '--out', str(tmp_path), '--settings', '20,10', 'collect']
    assert parse_and_dispatch(args) == EXIT_CONFIG


def test_stage_without_inputs_fails(tmp_path):
    assert parse_and_dispatch(['--config', SMOKE, '--out', str(tmp_path), 'score']) == EXIT_STAGE


def test_collect_then_tune(tmp_path):
    base = ['--config', SMOKE, '--out', str(tmp_path)]
    assert parse_and_dispatch(base + ['collect']) == EXIT_OK
    assert (tmp_path / 'R5_C50' / 'dataset.jsonl').exists()
    assert parse_and_dispatch(base + ['tune-pid']) == EXIT_OK
    assert (tmp_path / 'R5_C50' / 'pid.json').exists()
    pid = json.loads((tmp_path / 'R5_C50' / 'pid.json').read_text(encoding='utf-8'))
    assert pid['reference']['kp'] == 10.0
    assert pid['reference_score'] > 0.0
    assert (tmp_path / 'grid_5_50.csv').exists()
