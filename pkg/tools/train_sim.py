"""
train-sim 阶段 - 从探索数据集训练每个设置的模拟器
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

from shared.learning.simlearn import SimulatorModel, load_simulator, save_simulator, train_simulator
from shared.lung.dynamics import LungSetting
from shared.storage.experiment_config import SettingSpec
from tools.common import StageContext, fan_out, load_episodes, run_guarded, setting_tasks

logger = logging.getLogger(__name__)


@dataclass
class SimSummary:
    setting: str
    n_episodes: int
    heldout_mae: Optional[float]
    path: str


def load_setting_simulator(ctx: StageContext, setting: LungSetting) -> SimulatorModel:
    path = ctx.store.simulator_path(setting)
    return run_guarded('load-simulator', setting, lambda: load_simulator(path))


def train_setting(ctx: StageContext, spec: SettingSpec) -> SimSummary:
    """读取数据集、训练模拟器并保存 simulator.json"""
    setting = spec.setting

    def _train() -> SimSummary:
        episodes = load_episodes(ctx, setting)
        model = train_simulator(episodes, spec.arch, ctx.cfg.simulator, seed=ctx.seed_for('simulator', setting.key),
                                setting=setting)
        path = ctx.store.simulator_path(setting)
        save_simulator(path, model)
        return SimSummary(setting=setting.key, n_episodes=len(episodes), heldout_mae=model.training.heldout_mae,
                          path=str(path))

    return run_guarded('train-sim', setting, _train)


def _train_task(task: Tuple[StageContext, SettingSpec]) -> SimSummary:
    ctx, spec = task
    return train_setting(ctx, spec)


def run_train_sim(ctx: StageContext, jobs: int = 1) -> List[SimSummary]:
    return fan_out(_train_task, setting_tasks(ctx), jobs)
