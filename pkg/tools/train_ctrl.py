"""
train-ctrl 阶段 - 在冻结的模拟器上训练残差控制器（λ 扫描，按模拟器分数选出最佳）
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

from shared.learning.policy import (ControllerPolicy, TrainRun, make_policy, save_policy, simulated_score,
                                    train_analytic)
from shared.learning.simlearn import SimulatorModel
from shared.lung.dynamics import Waveform
from shared.lung.pid import PidCoefficients
from shared.storage.experiment_config import SettingSpec
from tools.common import StageContext, fan_out, run_guarded, setting_tasks
from tools.train_sim import load_setting_simulator
from tools.tune_pid import load_pid

logger = logging.getLogger(__name__)


@dataclass
class LambdaResult:
    lam: float
    simulated_score: float
    policy: ControllerPolicy
    run: TrainRun


@dataclass
class SweepResult:
    """λ 扫描结果：best 为模拟器分数最低的一项（平分取较小的 λ）"""
    results: List[LambdaResult] = field(default_factory=list)

    @property
    def best(self) -> LambdaResult:
        return min(self.results, key=lambda r: (r.simulated_score, r.lam))


def lambda_values(ctx: StageContext) -> Tuple[float, ...]:
    sweep = ctx.cfg.controller.lambda_sweep
    return sweep if sweep else (ctx.cfg.controller.lam,)


def train_sweep(ctx: StageContext, pid: PidCoefficients, simulators: Sequence[SimulatorModel],
                waveforms: Sequence[Waveform], seed_key: str) -> SweepResult:
    """
    对每个 λ 从同一个 PID 出发训练一个残差控制器

    Args:
        ctx: 运行上下文
        pid: 基线 PID
        simulators: 训练用模拟器（轮转）
        waveforms: 目标波形
        seed_key: 网络初始化种子的键
    """
    spec = ctx.cfg.controller
    sweep = SweepResult()
    for lam in lambda_values(ctx):
        policy = make_policy(pid, lam=lam, window=spec.window, depth=spec.depth, width=spec.width,
                             seed=ctx.seed_for('policy', seed_key), u_max=ctx.cfg.dynamics.u_max)
        trained, run = train_analytic(policy, simulators, waveforms, spec.hyper)
        score = simulated_score(trained, simulators, waveforms)
        logger.info(f"{seed_key} λ={lam:g}: 模拟器分数 {score:.4f}")
        sweep.results.append(LambdaResult(lam=lam, simulated_score=score, policy=trained, run=run))
    return sweep


@dataclass
class ControllerSummary:
    setting: str
    best_lambda: float
    simulated_scores: List[Tuple[float, float]]


def train_setting_controller(ctx: StageContext, spec: SettingSpec) -> ControllerSummary:
    """读取 pid.json 和 simulator.json，训练并保存 policy.json（最佳 λ）以及每个 λ 的策略"""
    setting = spec.setting

    def _train() -> ControllerSummary:
        pid = load_pid(ctx, setting).coefficients
        sim = load_setting_simulator(ctx, setting)
        sweep = train_sweep(ctx, pid, [sim], ctx.cfg.waveforms(), setting.key)
        for result in sweep.results:
            save_policy(ctx.store.policy_path(setting, suffix=f"lam{result.lam:g}"), result.policy)
        best = sweep.best
        save_policy(ctx.store.policy_path(setting), best.policy)
        return ControllerSummary(setting=setting.key, best_lambda=best.lam,
                                 simulated_scores=[(r.lam, r.simulated_score) for r in sweep.results])

    return run_guarded('train-ctrl', setting, _train)


def _train_task(task: Tuple[StageContext, SettingSpec]) -> ControllerSummary:
    ctx, spec = task
    return train_setting_controller(ctx, spec)


def run_train_ctrl(ctx: StageContext, jobs: int = 1) -> List[ControllerSummary]:
    return fan_out(_train_task, setting_tasks(ctx), jobs)
