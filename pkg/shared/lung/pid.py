"""
PID 控制 - 控制律与穷举网格搜索调参
"""
import csv
import itertools
import logging
import math
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from shared.lung.dynamics import LungSetting, PlantFactory, Waveform

logger = logging.getLogger(__name__)

# 网格每个维度的 20 个取值
GRID_VALUES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9,
               1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0)
DEFAULT_U_MAX = 100.0

# 物理测试肺上的最佳 PID（仅作参考）
REFERENCE_BEST_PID = {
    (5.0, 10.0): (10.0, 0.2, 0.0),
    (5.0, 20.0): (10.0, 10.0, 0.0),
    (5.0, 50.0): (10.0, 10.0, 0.0),
    (20.0, 10.0): (8.0, 1.0, 0.0),
    (20.0, 20.0): (5.0, 10.0, 0.0),
    (20.0, 50.0): (5.0, 10.0, 0.0),
}


@dataclass(frozen=True)
class PidCoefficients:
    """
    PID 系数

    Attributes:
        kp: 比例增益
        ki: 积分增益
        kd: 微分增益
        window: 积分窗口 k（求和 ε_t..ε_{t-k}）；None 表示本次吸气以来的全部误差
    """
    kp: float
    ki: float = 0.0
    kd: float = 0.0
    window: Optional[int] = None

    def __post_init__(self):
        if self.kp < 0 or self.ki < 0 or self.kd < 0:
            raise ValueError(f"PID 增益必须非负: {self.as_tuple()}")
        if self.window is not None and self.window < 0:
            raise ValueError(f"积分窗口必须非负: {self.window}")

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.kp, self.ki, self.kd)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PidCoefficients':
        window = data.get('window')
        return cls(kp=float(data['kp']), ki=float(data.get('ki', 0.0)), kd=float(data.get('kd', 0.0)),
                   window=None if window is None else int(window))


def reference_pid(setting: LungSetting) -> Optional[PidCoefficients]:
    """标准设置在物理测试肺上的最佳 PID；非标准设置返回 None"""
    gains = REFERENCE_BEST_PID.get((setting.R, setting.C)) if setting.is_iso else None
    return PidCoefficients(*gains) if gains else None


class PidState:
    """误差历史环形缓冲区（长度 k+1，初始为零）"""

    def __init__(self, window: Optional[int] = None):
        self.window = window
        self.reset()

    def reset(self):
        if self.window is None:
            self.errors = deque()
        else:
            self.errors = deque([0.0] * (self.window + 1), maxlen=self.window + 1)

    @property
    def last_error(self) -> float:
        return self.errors[-1] if self.errors else 0.0


def pid_output(errors: Sequence[float], prev_error: float, c: PidCoefficients) -> float:
    """
    截断前的 PID 输出：kp·ε_t + ki·Σε + kd·(ε_t - ε_{t-1})

    Args:
        errors: 积分窗口内的误差，最后一个是当前误差 ε_t
        prev_error: ε_{t-1}
        c: PID 系数
    """
    err = errors[-1]
    return c.kp * err + c.ki * math.fsum(errors) + c.kd * (err - prev_error)


def pid_control(state: PidState, target: float, measured: float, c: PidCoefficients,
                u_max: float = DEFAULT_U_MAX) -> float:
    """
    PID 控制律：把 ε = target - measured 压入历史，返回截断到 [0, u_max] 的控制量

    Args:
        state: 误差历史（会被修改）
        target: 目标压力
        measured: 测量压力
        c: PID 系数
        u_max: 控制上限

    Returns:
        控制量 u
    """
    err = target - measured
    prev = state.last_error
    state.errors.append(err)
    return min(max(pid_output(state.errors, prev, c), 0.0), u_max)


class PidController:
    """PID 控制器（每次吸气开始时清空积分历史，防止积分饱和）"""

    def __init__(self, coefficients: PidCoefficients, u_max: float = DEFAULT_U_MAX):
        self.coefficients = coefficients
        self.u_max = u_max
        self.state = PidState(coefficients.window)

    def reset(self) -> None:
        self.state.reset()

    def control(self, target: float, measured: float, t: float) -> float:
        return pid_control(self.state, target, measured, self.coefficients, self.u_max)


@dataclass(frozen=True)
class GridSpec:
    """网格定义：每个系数的取值列表"""
    kp: Tuple[float, ...] = GRID_VALUES
    ki: Tuple[float, ...] = GRID_VALUES
    kd: Tuple[float, ...] = (0.0,)

    def __post_init__(self):
        if not self.kp or not self.ki or not self.kd:
            raise ValueError("网格的每个维度都必须非空")

    @classmethod
    def default(cls, full: bool = False) -> 'GridSpec':
        """默认 P×I 网格（D 固定为 0）；full=True 时为完整的 P×I×D 网格"""
        return cls(kd=GRID_VALUES if full else (0.0,))

    def points(self) -> List[PidCoefficients]:
        return [PidCoefficients(kp, ki, kd) for kp, ki, kd in itertools.product(self.kp, self.ki, self.kd)]

    def __len__(self) -> int:
        return len(self.kp) * len(self.ki) * len(self.kd)


@dataclass
class GridRow:
    coefficients: PidCoefficients
    scores: Dict[str, float]
    mean: float


@dataclass
class GridSearchResult:
    best: PidCoefficients
    best_score: float
    table: List[GridRow] = field(default_factory=list)


def _evaluate_grid_point(task) -> GridRow:
    """评估一个网格点（进程池工作函数）"""
    from shared.learning.policy import score_controller

    coefficients, factories, waveforms, u_max, by_setting = task
    scores: Dict[str, float] = {}
    if by_setting:
        for factory in factories:
            scores[factory.setting.key] = score_controller(PidController(coefficients, u_max), factory, waveforms)
    else:
        factory = factories[0]
        for wf in waveforms:
            scores[wf.key] = score_controller(PidController(coefficients, u_max), factory, [wf])
    values = list(scores.values())
    mean = math.inf if any(math.isinf(v) for v in values) else math.fsum(values) / len(values)
    return GridRow(coefficients=coefficients, scores=scores, mean=mean)


def _run_grid(factories: Sequence[PlantFactory], grid: GridSpec, waveforms: Sequence[Waveform],
              u_max: float, by_setting: bool, jobs: int) -> GridSearchResult:
    if not waveforms:
        raise ValueError("waveforms 不能为空")
    points = grid.points()
    tasks = [(c, list(factories), list(waveforms), u_max, by_setting) for c in points]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            table = list(pool.map(_evaluate_grid_point, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        table = [_evaluate_grid_point(task) for task in tasks]
    for row in table:
        logger.debug(f"PID {row.coefficients.as_tuple()} -> {row.mean:.4f}")
    # 平分时取字典序最小的 (kp, ki, kd)
    best_row = min(table, key=lambda r: (r.mean, r.coefficients.as_tuple()))
    return GridSearchResult(best=best_row.coefficients, best_score=best_row.mean, table=table)


def grid_search(plant_factory: PlantFactory, grid: GridSpec, waveforms: Sequence[Waveform],
                u_max: float = DEFAULT_U_MAX, jobs: int = 1) -> GridSearchResult:
    """
    穷举网格搜索：每个网格点对每个波形跑 3 次呼吸，按忽略首次呼吸的平均 L1 评分，取最小值

    安全中止按无穷大分数处理。

    Args:
        plant_factory: 被控对象工厂（每次评估新建对象）
        grid: 网格
        waveforms: 目标波形列表
        u_max: 控制上限
        jobs: 并行进程数

    Returns:
        最佳系数、最佳分数和完整分数表
    """
    result = _run_grid([plant_factory], grid, waveforms, u_max, by_setting=False, jobs=jobs)
    logger.info(f"{plant_factory.setting.key} 网格搜索完成（{len(grid)} 个点），"
                f"最佳 PID {result.best.as_tuple()}，分数 {result.best_score:.4f}")
    return result


def robust_grid_search(plant_factories: Sequence[PlantFactory], grid: GridSpec, waveforms: Sequence[Waveform],
                       u_max: float = DEFAULT_U_MAX, jobs: int = 1) -> GridSearchResult:
    """在多个肺设置上平均评分，找出整体表现最好的单个 PID"""
    if not plant_factories:
        raise ValueError("plant_factories 不能为空")
    result = _run_grid(plant_factories, grid, waveforms, u_max, by_setting=True, jobs=jobs)
    logger.info(f"跨 {len(plant_factories)} 个设置的网格搜索完成，"
                f"最佳 PID {result.best.as_tuple()}，平均分数 {result.best_score:.4f}")
    return result


def save_grid_table(path: Union[str, Path], result: GridSearchResult) -> None:
    """分数表写为 CSV：kp, ki, kd, 各列分数, mean"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(result.table[0].scores) if result.table else []
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['kp', 'ki', 'kd'] + [f"score_{c}" for c in columns] + ['mean'])
        for row in result.table:
            writer.writerow([repr(v) for v in row.coefficients.as_tuple()]
                            + [repr(row.scores[c]) for c in columns] + [repr(row.mean)])
