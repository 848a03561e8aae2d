"""
benchmark - 端到端实验流程

- 性能实验：每个设置 采集 → 网格 PID → 训练模拟器 → 开环评估 → 训练残差控制器 → 真实对象评分
- 鲁棒性实验：单个 PID / 单个控制器覆盖全部设置
- 样本效率：解析策略梯度与 REINFORCE 的训练曲线
- 气球模型压力测试：单独报告，不混入主结果
"""
import logging
import math
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from shared.learning.policy import (ANALYTIC, REINFORCE, ControllerPolicy, ResidualController, make_policy,
                                    save_policy, score_controller, simulated_score, train_analytic,
                                    train_reinforce_baseline)
from shared.learning.simlearn import train_simulator
from shared.lung.dynamics import Controller, PlantFactory, Waveform, run_breath, waveform_target
from shared.lung.pid import PidController, robust_grid_search
from shared.storage.artifact_store import BALLOON_HEADER
from shared.storage.experiment_config import SettingSpec
from tools.collect import collect_setting
from tools.common import StageContext, dataset_path, fan_out, load_episodes, run_guarded, setting_tasks
from tools.eval_sim import SimEvaluation, evaluate_setting, write_evaluations
from tools.score import LEARNED, PID, RESIDUAL, ROBUSTNESS, ScoreRow, score_setting, write_scores
from tools.train_ctrl import train_setting_controller, train_sweep
from tools.train_sim import load_setting_simulator, train_setting
from tools.tune_pid import load_pid, tune_setting

logger = logging.getLogger(__name__)

# 常量定义
BALLOON = 'balloon'
ROBUST_POLICY_FILE = 'policy_robust.json'
CONVERGENCE_FRACTION = 0.1

Curve = List[Tuple[int, float]]


@dataclass
class BalloonRow:
    setting: str
    heldout_mae: Optional[float]

    def row(self, config_hash: str, seed: int) -> list:
        return [self.setting, self.heldout_mae, config_hash, seed]


@dataclass
class ResultBundle:
    """
    一次基准运行的全部结果（每个数都能追溯到配置哈希和种子）

    Attributes:
        config_hash: 配置哈希
        seed: 主种子
        scores: 性能与鲁棒性评分行
        simulators: 每个设置的模拟器评估
        curves: {(方法, 设置): [(回合数, 分数)]}
        balloon: 气球模型压力测试结果
    """
    config_hash: str
    seed: int
    scores: List[ScoreRow] = field(default_factory=list)
    simulators: List[SimEvaluation] = field(default_factory=list)
    curves: Dict[Tuple[str, str], Curve] = field(default_factory=dict)
    balloon: List[BalloonRow] = field(default_factory=list)

    def merge(self, other: 'ResultBundle') -> 'ResultBundle':
        self.scores.extend(other.scores)
        self.simulators.extend(other.simulators)
        self.curves.update(other.curves)
        self.balloon.extend(other.balloon)
        return self


def _bundle(ctx: StageContext, **kwargs) -> ResultBundle:
    return ResultBundle(config_hash=ctx.config_hash, seed=ctx.seed, **kwargs)


def _reuse(ctx: StageContext, path) -> bool:
    if ctx.resume and path.exists():
        logger.info(f"复用已有产物 {path}")
        return True
    return False


def _ensure_simulator(ctx: StageContext, spec: SettingSpec) -> None:
    """数据集和模拟器缺失时补齐（已有则直接使用）"""
    if not dataset_path(ctx, spec.setting).exists():
        collect_setting(ctx, spec)
    if not ctx.store.simulator_path(spec.setting).exists():
        train_setting(ctx, spec)


# ========== 性能实验 ==========

def _performance_setting(task: Tuple[StageContext, SettingSpec]) -> Tuple[List[ScoreRow], SimEvaluation]:
    ctx, spec = task
    setting = spec.setting
    store = ctx.store
    logger.info(f"性能实验: {setting.key}")
    if not _reuse(ctx, dataset_path(ctx, setting)):
        collect_setting(ctx, spec)
    if not _reuse(ctx, store.pid_path(setting)):
        tune_setting(ctx, spec, jobs=1)
    if not _reuse(ctx, store.simulator_path(setting)):
        train_setting(ctx, spec)
    evaluation = evaluate_setting(ctx, spec)
    if not _reuse(ctx, store.policy_path(setting)):
        train_setting_controller(ctx, spec)
    rows = score_setting(ctx, spec)
    if ctx.plot:
        run_guarded('plot', setting, lambda: _plot_setting(ctx, spec))
    return rows, evaluation


def run_performance_experiment(ctx: StageContext, jobs: int = 1) -> ResultBundle:
    """
    每个设置独立跑完整流程，设置之间并行

    Returns:
        含 PID / 残差 / learned 评分行和模拟器评估的结果
    """
    results = fan_out(_performance_setting, setting_tasks(ctx), jobs)
    bundle = _bundle(ctx)
    for rows, evaluation in results:
        bundle.scores.extend(rows)
        bundle.simulators.append(evaluation)
    return bundle


def _plot_setting(ctx: StageContext, spec: SettingSpec) -> None:
    """最高 PIP 波形上 PID 与 learned 控制器的压力轨迹（各跑两次呼吸）"""
    from shared.learning.policy import load_policy
    from shared.utils.plotting import plot_trajectories

    setting = spec.setting
    wf = max(ctx.cfg.waveforms(), key=lambda w: w.pip)
    factory = ctx.plant_factory(setting)
    controllers: Dict[str, Controller] = {
        'pid': PidController(load_pid(ctx, setting).coefficients, ctx.cfg.dynamics.u_max),
        'learned': ResidualController(load_policy(ctx.store.policy_path(setting))),
    }
    series = {}
    times: Sequence[float] = []
    for name, controller in controllers.items():
        traj = run_breath(factory(), controller, wf, n_breaths=2)
        times = [s.t for s in traj.samples]
        series[name] = [s.p for s in traj.samples]
    target = [waveform_target(t, wf) for t in times]
    plot_trajectories(ctx.store.path(f"trajectory_{setting.R:g}_{setting.C:g}.svg"), times, series, target,
                      f"PIP {wf.pip:g} {setting.key}")


# ========== 鲁棒性实验 ==========

def _aggregate_score(controller_for, factories: Sequence[PlantFactory], waveforms: Sequence[Waveform]) -> float:
    scores = [score_controller(controller_for(), f, waveforms) for f in factories]
    return math.fsum(scores) / len(scores)


def run_robustness_experiment(ctx: StageContext, jobs: int = 1) -> ResultBundle:
    """
    单个控制器覆盖全部设置：跨设置平均分最好的单个 PID，
    以及在全部模拟器上轮转训练的单个残差控制器，两者都在全部真实对象上取平均分

    只有一个设置时退化为性能实验（相同的 PID 与初始化种子）。
    """
    cfg = ctx.cfg
    specs = list(cfg.settings)
    keys = [s.setting.key for s in specs]
    label = ';'.join(keys)
    seed_key = keys[0] if len(keys) == 1 else 'robust'
    logger.info(f"鲁棒性实验: {label}")

    def _robust() -> ResultBundle:
        for spec in specs:
            _ensure_simulator(ctx, spec)
        waveforms = cfg.waveforms()
        factories = [ctx.plant_factory(s.setting) for s in specs]
        grid = robust_grid_search(factories, cfg.grid, waveforms, u_max=cfg.dynamics.u_max, jobs=jobs)
        simulators = [load_setting_simulator(ctx, s.setting) for s in specs]
        sweep = train_sweep(ctx, grid.best, simulators, waveforms, seed_key)
        save_policy(ctx.store.path(ROBUST_POLICY_FILE), sweep.best.policy)

        u_max = cfg.dynamics.u_max
        rows = [ScoreRow(ROBUSTNESS, label, PID, None,
                         _aggregate_score(lambda: PidController(grid.best, u_max), factories, waveforms))]
        for result in sweep.results:
            rows.append(ScoreRow(ROBUSTNESS, label, RESIDUAL, result.lam,
                                 _aggregate_score(partial(ResidualController, result.policy), factories, waveforms)))
        best = sweep.best
        rows.append(ScoreRow(ROBUSTNESS, label, LEARNED, best.lam,
                             _aggregate_score(partial(ResidualController, best.policy), factories, waveforms)))
        logger.info(f"鲁棒性评分: PID {rows[0].score:.4f}，learned(λ={best.lam:g}) {rows[-1].score:.4f}")
        return _bundle(ctx, scores=rows)

    return run_guarded('robustness', label, _robust)


# ========== 样本效率 ==========

def convergence_threshold(curve: Curve, fraction: float = CONVERGENCE_FRACTION) -> float:
    """
    收敛阈值：最终分数加上 fraction 倍的总改进量（初始分数 - 最终分数）

    Raises:
        ValueError: 曲线为空
    """
    if not curve:
        raise ValueError("训练曲线为空")
    initial, final = curve[0][1], curve[-1][1]
    return final + fraction * max(initial - final, 0.0)


def episodes_to_reach(curve: Curve, threshold: float) -> Optional[int]:
    """曲线第一次达到 score <= threshold 时的回合数；始终未达到时返回 None"""
    for episodes, score in curve:
        if score <= threshold:
            return episodes
    return None


def _efficiency_setting(task: Tuple[StageContext, SettingSpec]) -> Dict[Tuple[str, str], Curve]:
    ctx, spec = task
    setting = spec.setting

    def _curves() -> Dict[Tuple[str, str], Curve]:
        cfg = ctx.cfg
        _ensure_simulator(ctx, spec)
        if not ctx.store.pid_path(setting).exists():
            tune_setting(ctx, spec, jobs=1)
        sim = load_setting_simulator(ctx, setting)
        waveforms = cfg.waveforms()
        ctl = cfg.controller
        policy: ControllerPolicy = make_policy(load_pid(ctx, setting).coefficients, lam=ctl.lam, window=ctl.window,
                                               depth=ctl.depth, width=ctl.width,
                                               seed=ctx.seed_for('policy', 'curve', setting.key),
                                               u_max=cfg.dynamics.u_max)
        scorer = partial(simulated_score, simulators=[sim], waveforms=waveforms)
        _, analytic = train_analytic(policy, [sim], waveforms, ctl.hyper, scorer=scorer)
        # 两种方法按相同的回合间隔评分
        baseline = replace(cfg.baseline, score_every=ctl.hyper.score_every)
        _, reinforce = train_reinforce_baseline(policy, sim, waveforms, baseline,
                                                seed=ctx.seed_for('reinforce', setting.key), scorer=scorer)
        if analytic.scores:
            threshold = convergence_threshold(analytic.scores)
            a_ep = episodes_to_reach(analytic.scores, threshold)
            r_ep = episodes_to_reach(reinforce.scores, threshold)
            logger.info(f"{setting.key} 样本效率: 阈值 {threshold:.4f}，解析 {a_ep} / {analytic.episodes} 回合，"
                        f"REINFORCE {r_ep if r_ep is not None else '未达到'} / {reinforce.episodes} 回合")
        return {(ANALYTIC, setting.key): analytic.scores, (REINFORCE, setting.key): reinforce.scores}

    return run_guarded('sample-efficiency', setting, _curves)


def run_sample_efficiency_experiment(ctx: StageContext, jobs: int = 1) -> ResultBundle:
    """每个设置各训练一次解析策略梯度和 REINFORCE，输出 (回合数, 模拟器分数) 曲线"""
    bundle = _bundle(ctx)
    for curves in fan_out(_efficiency_setting, setting_tasks(ctx), jobs):
        bundle.curves.update(curves)
    return bundle


def write_curves(ctx: StageContext, bundle: ResultBundle) -> None:
    store = ctx.store
    by_key = {s.setting.key: s.setting for s in ctx.cfg.settings}
    for (method, key), points in bundle.curves.items():
        store.write_curve(method, by_key[key], points)
    if ctx.plot:
        from shared.utils.plotting import plot_curves

        for key, setting in by_key.items():
            curves = {m: pts for (m, k), pts in bundle.curves.items() if k == key}
            if curves:
                plot_curves(store.path(f"curve_{setting.R:g}_{setting.C:g}.svg"), curves,
                            f"Sample efficiency {key}")


# ========== 气球模型压力测试 ==========

def _balloon_setting(task: Tuple[StageContext, SettingSpec]) -> BalloonRow:
    ctx, spec = task
    setting = spec.setting

    def _stress() -> BalloonRow:
        cfg = ctx.cfg
        collect_setting(ctx, spec, kind=BALLOON, breaths=cfg.balloon.breaths)
        episodes = load_episodes(ctx, setting, kind=BALLOON)
        model = train_simulator(episodes, spec.arch, cfg.simulator, seed=ctx.seed_for('simulator', BALLOON, setting.key),
                                setting=setting)
        mae = model.training.heldout_mae if model.training else None
        logger.info(f"{setting.key} 气球模型: 留出 MAE {mae}")
        return BalloonRow(setting=setting.key, heldout_mae=mae)

    return run_guarded('balloon', setting, _stress)


def run_balloon_stress_test(ctx: StageContext, jobs: int = 1) -> ResultBundle:
    """在气球模型上采集数据并训练模拟器，单独报告留出开环 MAE"""
    if not ctx.cfg.balloon.enabled:
        logger.info("气球模型压力测试已关闭")
        return _bundle(ctx)
    return _bundle(ctx, balloon=fan_out(_balloon_setting, setting_tasks(ctx), jobs))


def write_balloon(ctx: StageContext, rows: List[BalloonRow]) -> None:
    ctx.store.write_csv('balloon.csv', BALLOON_HEADER, [r.row(ctx.config_hash, ctx.seed) for r in rows])


# ========== 全流程 ==========

def run_benchmark(ctx: StageContext, jobs: int = 1) -> ResultBundle:
    """
    依次运行性能、鲁棒性、样本效率实验和气球模型压力测试，写出全部结果文件和运行清单

    Returns:
        合并后的结果
    """
    bundle = run_performance_experiment(ctx, jobs)
    bundle.merge(run_robustness_experiment(ctx, jobs))
    bundle.merge(run_sample_efficiency_experiment(ctx, jobs))
    bundle.merge(run_balloon_stress_test(ctx, jobs))

    write_scores(ctx, bundle.scores)
    write_evaluations(ctx, bundle.simulators)
    write_curves(ctx, bundle)
    if ctx.cfg.balloon.enabled:
        write_balloon(ctx, bundle.balloon)

    config = ctx.cfg.to_dict()
    for key in ('output_dir', 'jobs'):
        config.pop(key, None)
    ctx.store.write_run_manifest(config, ctx.config_hash, 'benchmark', {
        'seed': ctx.seed,
        'settings': [s.setting.key for s in ctx.cfg.settings],
        'n_scores': len(bundle.scores),
    })
    learned = [r.score for r in bundle.scores if r.controller == LEARNED and np.isfinite(r.score)]
    logger.info(f"基准完成: {len(bundle.scores)} 个评分行，learned 平均分 "
                f"{(math.fsum(learned) / len(learned)) if learned else float('nan'):.4f}")
    return bundle
