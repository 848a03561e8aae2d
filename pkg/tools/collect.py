"""
collect 阶段 - 在真实被控对象上运行安全探索，保存轨迹数据集
"""
import logging
from dataclasses import dataclass
from typing import List, Tuple

from shared.lung.dynamics import Trajectory, save_trajectories
from shared.lung.explore import collect_trajectories
from shared.storage.experiment_config import SettingSpec
from shared.utils.seeding import derive_rng
from tools.common import StageContext, dataset_path, fan_out, run_guarded, setting_tasks

logger = logging.getLogger(__name__)


@dataclass
class CollectSummary:
    setting: str
    breaths: int
    kept: int
    path: str


def collect_setting(ctx: StageContext, spec: SettingSpec, kind: str = None, breaths: int = None) -> CollectSummary:
    """
    采集一个设置的探索数据集（一个被控对象依次跑完所有波形，每个波形 breaths 次呼吸）

    Args:
        ctx: 运行上下文
        spec: 设置配置
        kind: 被控对象类型，默认取配置
        breaths: 每个波形的呼吸次数，默认取配置
    """
    cfg = ctx.cfg
    kind = kind or cfg.plant_kind
    path = dataset_path(ctx, spec.setting, kind)
    per_waveform = breaths or cfg.dataset.breaths
    waveforms = cfg.waveforms()
    total = per_waveform * len(waveforms)

    def _collect() -> CollectSummary:
        plant = ctx.plant_factory(spec.setting, kind)()
        rng = derive_rng(cfg.seed, 'explore', kind, spec.setting.key)
        trajectories: List[Trajectory] = []
        for wf in waveforms:
            trajectories.extend(collect_trajectories(plant, spec.exploration, wf, per_waveform, rng,
                                                     cfg.dataset.context))
        save_trajectories(path, trajectories)
        logger.info(f"{spec.setting.key} ({kind}) 数据集已保存: {len(trajectories)}/{total} 次呼吸 -> {path}")
        return CollectSummary(setting=spec.setting.key, breaths=total, kept=len(trajectories), path=str(path))

    return run_guarded('collect', spec.setting, _collect)


def _collect_task(task: Tuple[StageContext, SettingSpec]) -> CollectSummary:
    ctx, spec = task
    return collect_setting(ctx, spec)


def run_collect(ctx: StageContext, jobs: int = 1) -> List[CollectSummary]:
    """对配置中的每个设置采集数据集"""
    return fan_out(_collect_task, setting_tasks(ctx), jobs)
