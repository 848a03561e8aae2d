"""
tune-pid 阶段 - 在真实被控对象上穷举网格搜索 PID
"""
import logging
from dataclasses import dataclass
from typing import List, Optional

from shared.learning.policy import score_controller
from shared.lung.dynamics import LungSetting
from shared.lung.pid import (GridSearchResult, PidCoefficients, PidController, grid_search, reference_pid,
                             save_grid_table)
from shared.storage.experiment_config import SettingSpec
from tools.common import StageContext, run_guarded

logger = logging.getLogger(__name__)


@dataclass
class PidSummary:
    """
    一个设置的调参结果

    Attributes:
        setting: 设置名
        coefficients: 网格搜索得到的最佳系数
        score: 最佳分数
        reference: 物理测试肺上的最佳系数（仅标准设置）
        reference_score: 参考系数在当前被控对象上的分数
    """
    setting: str
    coefficients: PidCoefficients
    score: float
    reference: Optional[PidCoefficients] = None
    reference_score: Optional[float] = None


def load_pid(ctx: StageContext, setting: LungSetting) -> PidSummary:
    data = ctx.store.read_json(ctx.store.pid_path(setting))
    reference = data.get('reference')
    return PidSummary(setting=setting.key, coefficients=PidCoefficients.from_dict(data['coefficients']),
                      score=float(data['score']),
                      reference=PidCoefficients.from_dict(reference) if reference else None,
                      reference_score=data.get('reference_score'))


def tune_setting(ctx: StageContext, spec: SettingSpec, jobs: int = 1) -> PidSummary:
    """
    网格搜索一个设置的最佳 PID，写出 pid.json 和完整分数表

    标准设置同时在当前被控对象上为参考 PID 评分，一并写入 pid.json。

    Args:
        ctx: 运行上下文
        spec: 设置配置
        jobs: 网格点并行进程数
    """
    setting = spec.setting

    def _tune() -> PidSummary:
        cfg = ctx.cfg
        factory = ctx.plant_factory(setting)
        result: GridSearchResult = grid_search(factory, cfg.grid, cfg.waveforms(), u_max=cfg.dynamics.u_max,
                                               jobs=jobs)
        save_grid_table(ctx.store.grid_table_path(setting), result)
        summary = PidSummary(setting=setting.key, coefficients=result.best, score=result.best_score,
                             reference=reference_pid(setting))
        if summary.reference is not None:
            summary.reference_score = score_controller(PidController(summary.reference, cfg.dynamics.u_max),
                                                       factory, cfg.waveforms())
            logger.info(f"{setting.key} 参考 PID {summary.reference.as_tuple()} 分数 {summary.reference_score:.4f}，"
                        f"网格最佳 {result.best.as_tuple()} 分数 {result.best_score:.4f}")
        ctx.store.write_json(ctx.store.pid_path(setting), {
            'setting': setting.to_dict(),
            'coefficients': result.best.to_dict(),
            'score': result.best_score,
            'grid_points': len(result.table),
            'reference': summary.reference.to_dict() if summary.reference else None,
            'reference_score': summary.reference_score,
        })
        return summary

    return run_guarded('tune-pid', setting, _tune)


def run_tune_pid(ctx: StageContext, jobs: int = 1) -> List[PidSummary]:
    """逐个设置调参；并行放在网格点层面"""
    return [tune_setting(ctx, spec, jobs) for spec in ctx.cfg.settings]
