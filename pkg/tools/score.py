"""
score 阶段 - 在真实被控对象上为 PID 和残差控制器评分
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

from shared.learning.policy import ControllerPolicy, ResidualController, load_policy, score_controller
from shared.lung.pid import PidController
from shared.storage.artifact_store import SCORES_HEADER
from shared.storage.experiment_config import SettingSpec
from tools.common import StageContext, fan_out, run_guarded, setting_tasks
from tools.tune_pid import load_pid
from tools.train_ctrl import lambda_values

logger = logging.getLogger(__name__)

# 常量定义
PERFORMANCE = 'performance'
ROBUSTNESS = 'robustness'
PID = 'pid'
RESIDUAL = 'residual'
LEARNED = 'learned'


@dataclass
class ScoreRow:
    experiment: str
    setting: str
    controller: str
    lam: Optional[float]
    score: float

    def row(self, config_hash: str, seed: int) -> list:
        return [self.experiment, self.setting, self.controller, self.lam, self.score, config_hash, seed]


def score_policy(ctx: StageContext, policy: ControllerPolicy, spec: SettingSpec) -> float:
    return score_controller(ResidualController(policy), ctx.plant_factory(spec.setting), ctx.cfg.waveforms())


def score_setting(ctx: StageContext, spec: SettingSpec) -> List[ScoreRow]:
    """
    为一个设置评分：最佳网格 PID、每个 λ 的残差控制器，以及按模拟器分数选出的 learned 行
    """
    setting = spec.setting

    def _score() -> List[ScoreRow]:
        store = ctx.store
        waveforms = ctx.cfg.waveforms()
        factory = ctx.plant_factory(setting)
        pid = load_pid(ctx, setting).coefficients
        rows = [ScoreRow(PERFORMANCE, setting.key, PID, None,
                         score_controller(PidController(pid, ctx.cfg.dynamics.u_max), factory, waveforms))]
        for lam in lambda_values(ctx):
            path = store.policy_path(setting, suffix=f"lam{lam:g}")
            if not path.exists():
                logger.warning(f"{setting.key} 缺少 λ={lam:g} 的策略 {path}，跳过")
                continue
            rows.append(ScoreRow(PERFORMANCE, setting.key, RESIDUAL, lam,
                                 score_policy(ctx, load_policy(path), spec)))
        best = load_policy(store.policy_path(setting))
        rows.append(ScoreRow(PERFORMANCE, setting.key, LEARNED, best.lam, score_policy(ctx, best, spec)))
        logger.info(f"{setting.key} 评分: PID {rows[0].score:.4f}，learned(λ={best.lam:g}) {rows[-1].score:.4f}")
        return rows

    return run_guarded('score', setting, _score)


def _score_task(task: Tuple[StageContext, SettingSpec]) -> List[ScoreRow]:
    ctx, spec = task
    return score_setting(ctx, spec)


def write_scores(ctx: StageContext, rows: List[ScoreRow]) -> None:
    ctx.store.write_csv('scores.csv', SCORES_HEADER, [r.row(ctx.config_hash, ctx.seed) for r in rows])


def run_score(ctx: StageContext, jobs: int = 1) -> List[ScoreRow]:
    rows = [row for rows in fan_out(_score_task, setting_tasks(ctx), jobs) for row in rows]
    write_scores(ctx, rows)
    return rows
