"""
安全探索 - 在基线 PID 周围叠加随机扰动，为模拟器采集训练数据

两种扰动策略（每次呼吸抽签决定）：
- 边界探索：吸气开始时叠加一个均匀采样的附加控制，并在随机时长内线性降到 0
- 三角探索：在 [t_min, t_max] 内叠加一个三角形附加控制，顶点在区间中点
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from shared.lung.dynamics import Episode, Plant, Trajectory, Waveform, episode_split, run_breath
from shared.lung.pid import PidCoefficients, PidController
from shared.utils.errors import SafetyAbort

logger = logging.getLogger(__name__)

BOUNDARY = "boundary"
TRIANGULAR = "triangular"

Range = Tuple[float, float]


def _check_range(name: str, rng_: Range):
    if rng_[0] > rng_[1]:
        raise ValueError(f"{name} 区间下限大于上限: {rng_}")


@dataclass(frozen=True)
class ExplorationConfig:
    """
    探索配置（每个肺设置一组）

    Attributes:
        base_pid: 基线 PID
        boundary_c: 边界探索附加控制范围 (c_min, c_max)
        boundary_t: 边界探索衰减时长范围 (t_min, t_max)，s
        triangular_c: 三角探索峰值范围
        triangular_t: 三角探索时间窗 (t_min, t_max)，s
        p_a: 每次呼吸选用边界探索的概率
    """
    base_pid: PidCoefficients
    boundary_c: Range = (50.0, 100.0)
    boundary_t: Range = (0.3, 0.6)
    triangular_c: Range = (-20.0, 40.0)
    triangular_t: Range = (0.1, 0.5)
    p_a: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.p_a <= 1.0:
            raise ValueError(f"p_a 必须在 [0, 1] 内: {self.p_a}")
        for name in ('boundary_c', 'boundary_t', 'triangular_c', 'triangular_t'):
            _check_range(name, getattr(self, name))
        if self.boundary_t[0] <= 0:
            raise ValueError(f"边界探索的衰减时长必须为正: {self.boundary_t}")
        if self.triangular_t[0] < 0:
            raise ValueError(f"三角探索时间窗不能为负: {self.triangular_t}")

    def check_waveform(self, wf: Waveform):
        """两种扰动都必须在吸气段内开始"""
        if self.triangular_t[0] >= wf.t_insp:
            raise ValueError(f"三角探索窗口 {self.triangular_t} 不在吸气段 {wf.t_insp}s 内")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'base_pid': self.base_pid.to_dict(),
            'boundary_c': list(self.boundary_c),
            'boundary_t': list(self.boundary_t),
            'triangular_c': list(self.triangular_c),
            'triangular_t': list(self.triangular_t),
            'p_a': self.p_a,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExplorationConfig':
        return cls(
            base_pid=PidCoefficients.from_dict(data['base_pid']),
            boundary_c=tuple(float(v) for v in data['boundary_c']),
            boundary_t=tuple(float(v) for v in data['boundary_t']),
            triangular_c=tuple(float(v) for v in data['triangular_c']),
            triangular_t=tuple(float(v) for v in data['triangular_t']),
            p_a=float(data['p_a']),
        )


def _iso_row(pid, ca, ta, cb, tb, p_a=0.25) -> ExplorationConfig:
    return ExplorationConfig(base_pid=PidCoefficients(*pid), boundary_c=ca, boundary_t=ta,
                             triangular_c=cb, triangular_t=tb, p_a=p_a)


# 六个标准设置的探索参数（按 (R, C) 索引）
ISO_EXPLORATION = {
    (5.0, 10.0): _iso_row((1.0, 0.5, 0.0), (50.0, 100.0), (0.3, 0.6), (-20.0, 40.0), (0.1, 0.5)),
    (5.0, 20.0): _iso_row((1.0, 3.0, 0.0), (50.0, 100.0), (0.4, 0.8), (-20.0, 60.0), (0.1, 0.5)),
    (5.0, 50.0): _iso_row((2.0, 4.0, 0.0), (75.0, 100.0), (1.0, 1.5), (-20.0, 60.0), (0.1, 0.5)),
    (20.0, 10.0): _iso_row((1.0, 0.5, 0.0), (50.0, 100.0), (0.3, 0.6), (-20.0, 40.0), (0.1, 0.5)),
    (20.0, 20.0): _iso_row((0.0, 3.0, 0.0), (30.0, 60.0), (0.5, 1.0), (-20.0, 40.0), (0.1, 0.5)),
    (20.0, 50.0): _iso_row((0.0, 4.0, 0.0), (70.0, 100.0), (1.0, 1.5), (-20.0, 40.0), (0.1, 0.5)),
}


@dataclass(frozen=True)
class BoundarySchedule:
    """f(t) = c·max(0, 1 - t/t_end)"""
    c: float
    t_end: float

    def __call__(self, t: float) -> float:
        return self.c * max(0.0, 1.0 - t / self.t_end)

    def to_dict(self) -> Dict[str, Any]:
        return {'kind': BOUNDARY, 'c': self.c, 't_end': self.t_end}


@dataclass(frozen=True)
class TriangularSchedule:
    """在 [t_start, t_end] 上的对称三角形，顶点 (中点, c)，区间外为 0"""
    c: float
    t_start: float
    t_end: float

    def __call__(self, t: float) -> float:
        if t <= self.t_start or t >= self.t_end:
            return 0.0
        apex = 0.5 * (self.t_start + self.t_end)
        if t <= apex:
            return self.c * (t - self.t_start) / (apex - self.t_start)
        return self.c * (self.t_end - t) / (self.t_end - apex)

    def to_dict(self) -> Dict[str, Any]:
        return {'kind': TRIANGULAR, 'c': self.c, 't_start': self.t_start, 't_end': self.t_end}


def boundary_schedule(rng: np.random.Generator, cfg: ExplorationConfig) -> BoundarySchedule:
    """边界探索：c ~ U(c_min, c_max)，t_end ~ U(t_min, t_max)"""
    c = float(rng.uniform(*cfg.boundary_c))
    t_end = float(rng.uniform(*cfg.boundary_t))
    return BoundarySchedule(c=c, t_end=t_end)


def triangular_schedule(rng: np.random.Generator, cfg: ExplorationConfig) -> TriangularSchedule:
    """三角探索：峰值 c ~ U(c_min, c_max)，时间窗固定为 (t_min, t_max)"""
    c = float(rng.uniform(*cfg.triangular_c))
    return TriangularSchedule(c=c, t_start=cfg.triangular_t[0], t_end=cfg.triangular_t[1])


def draw_policy(rng: np.random.Generator, p_a: float) -> str:
    return BOUNDARY if rng.random() < p_a else TRIANGULAR


class ExplorationController:
    """基线 PID + 附加扰动，结果截断到 [0, u_max]（负扰动在截断前从 PID 输出中减去）"""

    def __init__(self, base: PidController, schedule, u_max: float = 100.0):
        self.base = base
        self.schedule = schedule
        self.u_max = u_max

    def reset(self) -> None:
        self.base.reset()

    def control(self, target: float, measured: float, t: float) -> float:
        u = self.base.control(target, measured, t) + self.schedule(t)
        return min(max(u, 0.0), self.u_max)


def collect_trajectories(plant: Plant, cfg: ExplorationConfig, wf: Waveform, n_breaths: int,
                         rng: np.random.Generator, context: int = 10) -> List[Trajectory]:
    """
    逐次呼吸采集探索轨迹（每条轨迹一次呼吸，元数据记录所用策略）

    呼吸之间被控对象不重置，meta["lead"] 记录上一次呼吸末尾的 context 个压力。
    触发安全中止的呼吸会被跳过并记录日志，被控对象重置后继续采集（重置后没有前置压力）。
    """
    if n_breaths < 1:
        raise ValueError(f"n_breaths 必须 >= 1: {n_breaths}")
    cfg.check_waveform(wf)
    u_max = plant.cfg.u_max
    trajectories: List[Trajectory] = []
    aborted = 0
    lead: List[float] = []
    for breath in range(n_breaths):
        policy = draw_policy(rng, cfg.p_a)
        schedule = boundary_schedule(rng, cfg) if policy == BOUNDARY else triangular_schedule(rng, cfg)
        controller = ExplorationController(PidController(cfg.base_pid, u_max), schedule, u_max)
        try:
            traj = run_breath(plant, controller, wf, 1)
        except SafetyAbort as e:
            aborted += 1
            logger.warning(f"{plant.setting.key} {wf.key} 第 {breath} 次呼吸触发安全中止，已跳过: {e}")
            plant.reset()
            lead = []
            continue
        traj.meta = {'breath': breath, 'policy': policy, 'schedule': schedule.to_dict(), 'lead': lead}
        trajectories.append(traj)
        lead = (lead + [s.p for s in traj.samples])[-context:] if context > 0 else []
    logger.info(f"{plant.setting.key} {wf.key} 采集完成: {len(trajectories)} 次呼吸，中止 {aborted} 次")
    return trajectories


def collect_dataset(plant: Plant, cfg: ExplorationConfig, wf: Waveform, n_breaths: int,
                    rng: np.random.Generator, context: int = 10) -> List[Episode]:
    """
    采集探索数据集并切分为吸气回合

    Args:
        plant: 被控对象
        cfg: 探索配置
        wf: 目标波形
        n_breaths: 呼吸次数
        rng: 探索用随机数生成器（与被控对象的噪声生成器相互独立）
        context: 每个回合保留的前置压力个数

    Returns:
        回合列表（每个回合标注所用的探索策略）
    """
    episodes: List[Episode] = []
    for traj in collect_trajectories(plant, cfg, wf, n_breaths, rng, context):
        episodes.extend(episode_split(traj, context=context))
    return episodes
