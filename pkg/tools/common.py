"""
阶段公共部分 - 运行上下文、种子派生、被控对象工厂和设置级并行
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Sequence, TypeVar, Union

from shared.lung.dynamics import Episode, LungSetting, PlantFactory, episode_split, load_trajectories
from shared.storage.artifact_store import ArtifactStore
from shared.storage.experiment_config import ExperimentConfig, config_hash
from shared.utils.errors import StageFailed, VentBenchError
from shared.utils.seeding import derive_seed

logger = logging.getLogger(__name__)

T = TypeVar('T')
R = TypeVar('R')


@dataclass(frozen=True)
class StageContext:
    """
    一次 CLI 调用的运行上下文（可序列化，传给并行进程）

    Attributes:
        cfg: 合并覆盖项后的实验配置
        plot: 是否输出 SVG 图表
        resume: 已有产物时直接复用
    """
    cfg: ExperimentConfig
    plot: bool = False
    resume: bool = False

    @property
    def store(self) -> ArtifactStore:
        return ArtifactStore(self.cfg.output_dir)

    @property
    def config_hash(self) -> str:
        return config_hash(self.cfg)

    @property
    def seed(self) -> int:
        return self.cfg.seed

    def seed_for(self, *keys) -> int:
        return derive_seed(self.cfg.seed, *keys)

    def plant_factory(self, setting: LungSetting, kind: str = None) -> PlantFactory:
        """地面真值被控对象工厂；噪声种子按设置派生"""
        return PlantFactory(setting=setting, kind=kind or self.cfg.plant_kind, cfg=self.cfg.dynamics,
                            seed=self.seed_for('plant', setting.key))


def dataset_path(ctx: StageContext, setting: LungSetting, kind: str = None) -> Path:
    """地面真值对象的数据集为 dataset.jsonl，其他类型加后缀"""
    path = ctx.store.dataset_path(setting)
    if kind and kind != ctx.cfg.plant_kind:
        path = path.with_name(f"dataset_{kind}.jsonl")
    return path


def load_episodes(ctx: StageContext, setting: LungSetting, kind: str = None) -> List[Episode]:
    """读取某个设置的探索数据集并切分为回合"""
    path = dataset_path(ctx, setting, kind)
    if not path.exists():
        raise StageFailed('load-dataset', f"{setting.key}: 找不到数据集 {path}，请先运行 collect")
    episodes: List[Episode] = []
    for traj in load_trajectories(path):
        episodes.extend(episode_split(traj, context=ctx.cfg.dataset.context))
    return episodes


def run_guarded(stage: str, where: Union[LungSetting, str], fn: Callable[[], T]) -> T:
    """执行一个阶段，把子模块错误包装为带阶段名和设置名的 StageFailed"""
    label = where.key if isinstance(where, LungSetting) else where
    try:
        return fn()
    except StageFailed:
        raise
    except (VentBenchError, ValueError, KeyError, OSError) as e:
        raise StageFailed(stage, f"{label}: {e}") from e


def fan_out(fn: Callable[[T], R], items: Sequence[T], jobs: int) -> List[R]:
    """按设置并行执行，结果保持输入顺序"""
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def setting_tasks(ctx: StageContext) -> List[tuple]:
    return [(ctx, spec) for spec in ctx.cfg.settings]

