"""
eval-sim 阶段 - 留出集开环 MAE 与开环距离
"""
import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from shared.learning.simlearn import (EpisodeControls, PlantSystem, SimulatorSystem, compare_trajectory,
                                      open_loop_distance_stats, open_loop_mae)
from shared.storage.artifact_store import SIMULATORS_HEADER
from shared.storage.experiment_config import SettingSpec
from shared.utils.seeding import derive_rng
from tools.common import StageContext, fan_out, load_episodes, run_guarded, setting_tasks
from tools.train_sim import load_setting_simulator

logger = logging.getLogger(__name__)


@dataclass
class SimEvaluation:
    setting: str
    heldout_mae: float
    distance: float
    stderr: float
    per_step: List[float] = field(default_factory=list)

    def row(self, config_hash: str, seed: int) -> list:
        return [self.setting, self.heldout_mae, self.distance, self.stderr, config_hash, seed]


def evaluate_setting(ctx: StageContext, spec: SettingSpec) -> SimEvaluation:
    """
    评估一个设置的模拟器：留出回合上的开环 MAE，以及在探索控制分布下与真实对象的开环距离
    """
    setting = spec.setting

    def _evaluate() -> SimEvaluation:
        model = load_setting_simulator(ctx, setting)
        episodes = load_episodes(ctx, setting)
        held = [episodes[i] for i in model.training.heldout_index] if model.training else []
        if not held:
            logger.warning(f"{setting.key} 没有留出回合，改用全部回合评估")
            held = episodes
        mae = open_loop_mae(model, held)

        factory = ctx.plant_factory(setting)
        p0 = factory().measured
        stats = open_loop_distance_stats(PlantSystem(factory), SimulatorSystem(model, p0), EpisodeControls(held),
                                         ctx.cfg.open_loop.horizon, ctx.cfg.open_loop.samples,
                                         derive_rng(ctx.seed, 'open_loop', setting.key))
        logger.info(f"{setting.key} 开环评估: MAE {mae:.4f}，距离 {stats.mean:.4f} ± {stats.stderr:.4f}")

        if ctx.plot:
            from shared.utils.plotting import plot_open_loop, plot_trajectories

            plot_open_loop(ctx.store.path(f"open_loop_{setting.R:g}_{setting.C:g}.svg"), stats.per_step,
                           f"Open-loop distance {setting.key}")
            ep = held[0]
            true, sim = compare_trajectory(model, factory(), ep.controls[:-1])
            times = np.arange(len(true)) * ctx.cfg.dynamics.dt
            plot_trajectories(ctx.store.path(f"compare_{setting.R:g}_{setting.C:g}.svg"), times,
                              {'plant': true, 'simulator': sim}, np.full(len(true), ep.targets[0]),
                              f"Fixed controls {setting.key}")
        return SimEvaluation(setting=setting.key, heldout_mae=mae, distance=stats.mean, stderr=stats.stderr,
                             per_step=[float(d) for d in stats.per_step])

    return run_guarded('eval-sim', setting, _evaluate)


def _evaluate_task(task: Tuple[StageContext, SettingSpec]) -> SimEvaluation:
    ctx, spec = task
    return evaluate_setting(ctx, spec)


def write_evaluations(ctx: StageContext, evaluations: List[SimEvaluation]) -> None:
    store = ctx.store
    store.write_csv('simulators.csv', SIMULATORS_HEADER, [e.row(ctx.config_hash, ctx.seed) for e in evaluations])
    for spec, e in zip(ctx.cfg.settings, evaluations):
        store.write_open_loop(spec.setting, e.per_step)


def run_eval_sim(ctx: StageContext, jobs: int = 1) -> List[SimEvaluation]:
    evaluations = fan_out(_evaluate_task, setting_tasks(ctx), jobs)
    write_evaluations(ctx, evaluations)
    return evaluations
