import json
import math
from dataclasses import replace
from pathlib import Path

import pytest

from shared.learning.policy import ANALYTIC, REINFORCE
from shared.storage.artifact_store import BALLOON_HEADER, SCORES_HEADER, SIMULATORS_HEADER
from shared.storage.experiment_config import config_hash, load_experiment_config
from tools.benchmark import (ROBUST_POLICY_FILE, convergence_threshold, episodes_to_reach, run_benchmark,
                             run_performance_experiment, run_robustness_experiment,
                             run_sample_efficiency_experiment)
from tools.collect import collect_setting
from tools.common import StageContext
from tools.score import LEARNED, PERFORMANCE, PID, RESIDUAL, ROBUSTNESS

pytestmark = pytest.mark.bench

CONFIG_DIR = Path(__file__).resolve().parent.parent / 'config'
SMOKE = CONFIG_DIR / 'smoke.json'
OUTPUT_FILES = ('scores.csv', 'simulators.csv', 'balloon.csv', 'curve_analytic_5_50.csv',
                'curve_reinforce_5_50.csv', 'open_loop_5_50.csv', 'grid_5_50.csv', 'run.json')


def _context(out: Path, config: Path = SMOKE) -> StageContext:
    cfg = load_experiment_config(str(config))
    return StageContext(cfg=replace(cfg, output_dir=str(out)))


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    ctx = _context(tmp_path_factory.mktemp('smoke'))
    return ctx, run_benchmark(ctx)


def test_outputs_written(smoke_run):
    ctx, _ = smoke_run
    store = ctx.store
    for name in OUTPUT_FILES:
        assert store.path(name).exists(), name
    assert store.policy_path(ctx.cfg.settings[0].setting).exists()
    assert store.path(ROBUST_POLICY_FILE).exists()
    assert list(store.read_csv('simulators.csv')[0]) == SIMULATORS_HEADER
    assert list(store.read_csv('balloon.csv')[0]) == BALLOON_HEADER


def test_score_rows_trace_to_config(smoke_run):
    ctx, bundle = smoke_run
    rows = ctx.store.read_csv('scores.csv')
    assert list(rows[0]) == SCORES_HEADER
    assert len(rows) == len(bundle.scores) == 6
    assert {r['config_hash'] for r in rows} == {config_hash(ctx.cfg)}
    assert {r['seed'] for r in rows} == {'0'}
    kinds = [(r.experiment, r.controller) for r in bundle.scores]
    assert kinds == [(PERFORMANCE, PID), (PERFORMANCE, RESIDUAL), (PERFORMANCE, LEARNED),
                     (ROBUSTNESS, PID), (ROBUSTNESS, RESIDUAL), (ROBUSTNESS, LEARNED)]


def test_single_setting_robustness_matches_performance(smoke_run):
    _, bundle = smoke_run
    perf = {r.controller: r.score for r in bundle.scores if r.experiment == PERFORMANCE}
    robust = {r.controller: r.score for r in bundle.scores if r.experiment == ROBUSTNESS}
    assert robust[PID] == pytest.approx(perf[PID])
    assert robust[LEARNED] == pytest.approx(perf[LEARNED])


def test_learned_scores_are_finite(smoke_run):
    _, bundle = smoke_run
    assert all(math.isfinite(r.score) for r in bundle.scores if r.controller == LEARNED)
    evaluation = bundle.simulators[0]
    assert math.isfinite(evaluation.heldout_mae) and evaluation.distance >= 0


def test_curves_are_monotone_in_episodes(smoke_run):
    ctx, bundle = smoke_run
    for points in bundle.curves.values():
        episodes = [e for e, _ in points]
        assert episodes == sorted(set(episodes))
        assert episodes[0] == 0
    reinforce = ctx.store.read_csv('curve_reinforce_5_50.csv')
    assert [r['episode'] for r in reinforce] == ['0', '6', '12']


def test_manifest_omits_machine_paths(smoke_run):
    ctx, bundle = smoke_run
    manifest = json.loads(ctx.store.path('run.json').read_text(encoding='utf-8'))
    assert manifest['config_hash'] == bundle.config_hash
    assert manifest['settings'] == ['R5_C50']
    assert 'output_dir' not in manifest['config']
    assert 'jobs' not in manifest['config']


@pytest.mark.slow
def test_benchmark_is_reproducible(smoke_run, tmp_path):
    first, _ = smoke_run
    second = _context(tmp_path / 'again')
    run_benchmark(second)
    for name in OUTPUT_FILES:
        assert first.store.path(name).read_bytes() == second.store.path(name).read_bytes(), name


def test_collect_counts_breaths_per_waveform(tmp_path):
    ctx = _context(tmp_path)
    summary = collect_setting(ctx, ctx.cfg.settings[0], breaths=2)
    assert summary.breaths == 2 * len(ctx.cfg.waveforms())
    assert 0 < summary.kept <= summary.breaths


def test_convergence_threshold_and_episodes_to_reach():
    curve = [(0, 10.0), (6, 6.0), (12, 5.2), (18, 5.0)]
    threshold = convergence_threshold(curve)
    assert threshold == pytest.approx(5.5)
    assert episodes_to_reach(curve, threshold) == 12
    assert episodes_to_reach(curve, 4.9) is None
    # 没有改进时阈值就是最终分数
    assert convergence_threshold([(0, 3.0), (6, 3.5)]) == 3.5
    with pytest.raises(ValueError):
        convergence_threshold([])


# ========== 六个标准设置上的验收检查（较慢） ==========

@pytest.fixture(scope="module")
def iso6_run(tmp_path_factory):
    ctx = _context(tmp_path_factory.mktemp('iso6'), CONFIG_DIR / 'iso6.json')
    return ctx, run_performance_experiment(ctx, ctx.cfg.jobs)


@pytest.mark.slow
def test_simulators_fit_every_iso_setting(iso6_run):
    _, bundle = iso6_run
    assert len(bundle.simulators) == 6
    for evaluation in bundle.simulators:
        assert evaluation.heldout_mae <= 1.0, evaluation.setting


@pytest.mark.slow
def test_learned_controller_beats_best_pid(iso6_run):
    _, bundle = iso6_run
    pid = {r.setting: r.score for r in bundle.scores if r.experiment == PERFORMANCE and r.controller == PID}
    learned = {r.setting: r.score for r in bundle.scores if r.experiment == PERFORMANCE and r.controller == LEARNED}
    assert len(pid) == len(learned) == 6
    wins = sum(learned[key] < pid[key] for key in pid)
    improvement = sum((pid[key] - learned[key]) / pid[key] for key in pid) / len(pid)
    assert wins >= 5
    assert improvement >= 0.05


@pytest.mark.slow
def test_robust_controller_beats_best_single_pid(iso6_run):
    ctx, _ = iso6_run
    bundle = run_robustness_experiment(ctx, ctx.cfg.jobs)
    scores = {r.controller: r.score for r in bundle.scores if r.controller in (PID, LEARNED)}
    assert scores[LEARNED] < scores[PID]


@pytest.mark.slow
def test_analytic_gradient_needs_far_fewer_episodes(iso6_run):
    ctx, _ = iso6_run
    bundle = run_sample_efficiency_experiment(ctx, ctx.cfg.jobs)
    for spec in ctx.cfg.settings:
        key = spec.setting.key
        analytic = bundle.curves[(ANALYTIC, key)]
        reinforce = bundle.curves[(REINFORCE, key)]
        assert analytic[-1][1] < analytic[0][1], key
        threshold = convergence_threshold(analytic)
        a_ep = episodes_to_reach(analytic, threshold)
        r_ep = episodes_to_reach(reinforce, threshold)
        assert a_ep is not None and 0 < a_ep <= 200, key
        assert reinforce[-1][0] >= 10 * a_ep
        assert r_ep is None or r_ep >= 10 * a_ep, key
