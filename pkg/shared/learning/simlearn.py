"""
数据驱动的吸气动力学模拟器

模型由 N_B 个边界网络和一个通用网络拼接而成：回合第 i 步（i < N_B）到第 i+1 步的转移
由边界网络 i 预测，其余转移由通用网络预测。输入为最近 H_p 个压力和 H_c 个控制量
（回合开始处补零），输出为下一步压力。
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from shared.learning.nnet import (Mlp, backward, cosine_lr, forward, mlp_from_dict, mlp_to_dict,
                                  sgd_step)
from shared.lung.dynamics import Episode, LungSetting, Plant, PlantFactory
from shared.utils.errors import DegenerateData, DivergentLoss, EpisodeTooShort, StaleTape
from shared.utils.seeding import derive_rng, derive_seed

logger = logging.getLogger(__name__)

# 常量定义
SCALE_FLOOR = 1e-8
SIMULATOR_FORMAT = "ventbench-simulator"
SIMULATOR_FORMAT_VERSION = 1
ARCH_DIMENSIONS = ('d', 'W', 'H_p', 'H_c', 'N_B')


@dataclass(frozen=True)
class SimFeaturization:
    """历史窗口长度：H_p 个压力、H_c 个控制量"""
    H_p: int
    H_c: int

    def __post_init__(self):
        if self.H_p < 1 or self.H_c < 1:
            raise ValueError(f"H_p 和 H_c 必须 >= 1: H_p={self.H_p}, H_c={self.H_c}")

    @property
    def width(self) -> int:
        return self.H_p + self.H_c


@dataclass(frozen=True)
class SimArch:
    """
    模拟器结构

    Attributes:
        d: 隐藏层层数
        W: 隐藏层宽度
        H_p: 压力历史长度
        H_c: 控制历史长度
        N_B: 边界网络个数
    """
    d: int = 2
    W: int = 32
    H_p: int = 5
    H_c: int = 10
    N_B: int = 1

    def __post_init__(self):
        if self.d < 1 or self.W < 1:
            raise ValueError(f"网络深度和宽度必须 >= 1: d={self.d}, W={self.W}")
        if self.N_B < 0:
            raise ValueError(f"N_B 必须非负: {self.N_B}")
        SimFeaturization(self.H_p, self.H_c)

    @property
    def featurization(self) -> SimFeaturization:
        return SimFeaturization(self.H_p, self.H_c)

    @property
    def widths(self) -> List[int]:
        return [self.H_p + self.H_c] + [self.W] * self.d + [1]

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SimArch':
        return cls(**{k: int(data[k]) for k in ARCH_DIMENSIONS if k in data})


# 六个标准设置的模拟器结构（按 (R, C) 索引）
ISO_SIM_ARCH = {
    (5.0, 10.0): SimArch(d=9, N_B=1, H_p=5, W=150, H_c=10),
    (5.0, 20.0): SimArch(d=6, N_B=1, H_p=5, W=100, H_c=5),
    (5.0, 50.0): SimArch(d=6, N_B=1, H_p=10, W=150, H_c=10),
    (20.0, 10.0): SimArch(d=9, N_B=1, H_p=10, W=100, H_c=10),
    (20.0, 20.0): SimArch(d=9, N_B=1, H_p=10, W=150, H_c=10),
    (20.0, 50.0): SimArch(d=9, N_B=1, H_p=10, W=150, H_c=10),
}


@dataclass(frozen=True)
class SimHyper:
    """模拟器训练超参数"""
    epochs: int = 200
    batch_size: int = 64
    lr: float = 0.05
    weight_decay: float = 1e-5
    heldout_fraction: float = 0.2

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError(f"无效的训练轮数或批大小: epochs={self.epochs}, batch_size={self.batch_size}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError(f"学习率和权重衰减必须非负: lr={self.lr}, weight_decay={self.weight_decay}")
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise ValueError(f"留出比例必须在 [0, 1) 内: {self.heldout_fraction}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class Normalization:
    """逐特征标准化参数，以及目标压力的平移和缩放"""
    mean: np.ndarray
    scale: np.ndarray
    target_mean: float = 0.0
    target_scale: float = 1.0

    @classmethod
    def identity(cls, width: int) -> 'Normalization':
        return cls(mean=np.zeros(width), scale=np.ones(width))

    @classmethod
    def fit(cls, inputs: np.ndarray, targets: np.ndarray) -> 'Normalization':
        """由训练数据计算；方差为 0 的特征（或目标）缩放取 1"""
        std = inputs.std(axis=0)
        t_std = float(targets.std())
        return cls(mean=inputs.mean(axis=0), scale=np.where(std > SCALE_FLOOR, std, 1.0),
                   target_mean=float(targets.mean()), target_scale=t_std if t_std > SCALE_FLOOR else 1.0)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale

    def to_dict(self) -> Dict[str, Any]:
        return {'mean': self.mean.tolist(), 'scale': self.scale.tolist(),
                'target_mean': self.target_mean, 'target_scale': self.target_scale}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Normalization':
        return cls(mean=np.array(data['mean'], dtype=np.float64), scale=np.array(data['scale'], dtype=np.float64),
                   target_mean=float(data['target_mean']), target_scale=float(data['target_scale']))


def history_window(values: Sequence[float], end: int, length: int) -> np.ndarray:
    """取 values[end-length+1 .. end]（旧→新），不足部分在左侧补零"""
    start = end - length + 1
    window = np.asarray(values[max(start, 0):end + 1], dtype=np.float64)
    if start < 0:
        window = np.concatenate([np.zeros(-start), window])
    return window


def featurize(pressures: Sequence[float], controls: Sequence[float],
              norm: Optional[Normalization] = None) -> np.ndarray:
    """
    拼接压力历史和控制历史（各自旧→新）并标准化

    Args:
        pressures: 最近 H_p 个压力（已补零）
        controls: 最近 H_c 个控制量（已补零）
        norm: 标准化参数；None 表示不做变换
    """
    x = np.concatenate([np.asarray(pressures, dtype=np.float64), np.asarray(controls, dtype=np.float64)])
    return x if norm is None else norm.apply(x)


@dataclass
class RegressionSet:
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)


@dataclass
class RegressionSets:
    boundary: List[RegressionSet]
    general: RegressionSet

    def all_sets(self) -> List[RegressionSet]:
        return self.boundary + [self.general]

    def stacked(self) -> RegressionSet:
        sets = [s for s in self.all_sets() if len(s)]
        if not sets:
            return _empty_set(self.general.inputs.shape[1])
        return RegressionSet(np.vstack([s.inputs for s in sets]), np.concatenate([s.targets for s in sets]))


def _empty_set(width: int) -> RegressionSet:
    return RegressionSet(np.zeros((0, width)), np.zeros(0))


def _to_set(rows: List[np.ndarray], targets: List[float], width: int) -> RegressionSet:
    if not rows:
        return _empty_set(width)
    return RegressionSet(np.vstack(rows), np.array(targets, dtype=np.float64))


def build_regression_sets(episodes: Sequence[Episode], feat: SimFeaturization, N_B: int) -> RegressionSets:
    """
    从回合构造回归数据集（控制窗口不跨越回合边界，压力窗口从回合记录的上下文接续）

    第 i 个边界集合包含每个回合从第 i 步到第 i+1 步的转移（i < N_B），通用集合包含其余转移。
    长度不足 N_B+1 的回合只贡献它能覆盖的边界集合。

    Raises:
        EpisodeTooShort: 没有回合，或所有回合都不足两步
    """
    if not episodes:
        raise EpisodeTooShort("没有可用的回合")
    width = feat.width
    b_rows: List[List[np.ndarray]] = [[] for _ in range(N_B)]
    b_targets: List[List[float]] = [[] for _ in range(N_B)]
    g_rows: List[np.ndarray] = []
    g_targets: List[float] = []
    short = 0
    for ep in episodes:
        T = len(ep)
        if T < N_B + 1:
            short += 1
        lead = [float(p) for p in ep.context]
        pressures = lead + [float(p) for p in ep.pressures]
        for i in range(T - 1):
            x = featurize(history_window(pressures, len(lead) + i, feat.H_p),
                          history_window(ep.controls, i, feat.H_c))
            target = float(ep.pressures[i + 1])
            if i < N_B:
                b_rows[i].append(x)
                b_targets[i].append(target)
            else:
                g_rows.append(x)
                g_targets.append(target)
    sets = RegressionSets(boundary=[_to_set(r, t, width) for r, t in zip(b_rows, b_targets)],
                          general=_to_set(g_rows, g_targets, width))
    if sum(len(s) for s in sets.all_sets()) == 0:
        raise EpisodeTooShort(f"{len(episodes)} 个回合都不足两步，无法构造转移")
    if short:
        logger.warning(f"{short} 个回合短于 N_B+1={N_B + 1} 步，只参与部分边界集合")
    return sets


@dataclass
class SimTrainingReport:
    """训练记录：每个子网络的逐轮损失和留出集信息"""
    losses: Dict[str, List[float]] = field(default_factory=dict)
    heldout_index: List[int] = field(default_factory=list)
    heldout_mae: Optional[float] = None
    n_train: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SimTrainingReport':
        return cls(losses={k: list(v) for k, v in data.get('losses', {}).items()},
                   heldout_index=list(data.get('heldout_index', [])),
                   heldout_mae=data.get('heldout_mae'), n_train=int(data.get('n_train', 0)))


@dataclass
class SimulatorModel:
    """训练好的模拟器（训练后只读，可在线程间共享）"""
    arch: SimArch
    norm: Normalization
    boundary: List[Mlp]
    general: Mlp
    setting: Optional[LungSetting] = None
    training: Optional[SimTrainingReport] = None

    @property
    def featurization(self) -> SimFeaturization:
        return self.arch.featurization

    def net_for(self, step: int) -> Mlp:
        """预测第 step → step+1 转移的子网络"""
        return self.boundary[step] if step < len(self.boundary) else self.general


def resting_context(model: SimulatorModel, p0: float) -> List[float]:
    """静息上下文：回合开始前压力一直停在 p0"""
    return [float(p0)] * (model.arch.H_p - 1)


class SimulatorRollout:
    """
    自回归展开：每一步把预测的压力作为后续输入

    record=True 时保存每一步的 Tape，可用 backward / backward_step 求压力损失对控制量的梯度。
    context 是回合开始前的压力（旧→新），只作为压力窗口的输入，不参与反向传播。
    """

    def __init__(self, model: SimulatorModel, p0: float, record: bool = False,
                 context: Optional[Sequence[float]] = None):
        self.model = model
        self.record = record
        self.context: List[float] = [float(p) for p in context] if context is not None else []
        self.pressures: List[float] = [float(p0)]
        self.controls: List[float] = []
        self._tapes = []

    def __len__(self) -> int:
        return len(self.controls)

    def step(self, u: float) -> float:
        t = len(self.controls)
        self.controls.append(float(u))
        arch = self.model.arch
        x = featurize(history_window(self.context + self.pressures, len(self.context) + t, arch.H_p),
                      history_window(self.controls, t, arch.H_c), self.model.norm)
        y, tape = forward(self.model.net_for(t), x)
        p = float(y[0]) * self.model.norm.target_scale + self.model.norm.target_mean
        self.pressures.append(p)
        if self.record:
            self._tapes.append(tape)
        return p

    def backward_step(self, t: int, gp: np.ndarray, gu: np.ndarray) -> None:
        """
        反向传播第 t 步（p_{t+1} 的预测）：把 gp[t+1] 分配到 gp[≤t] 和 gu[≤t]（原地累加）

        调用前 gp[t+1] 必须已经包含所有下游贡献。
        """
        if not self.record:
            raise StaleTape("展开时未记录 Tape，无法反向传播")
        g = gp[t + 1]
        if g == 0.0:
            return
        arch = self.model.arch
        dx, _ = backward(self.model.net_for(t), self._tapes[t], np.array([g * self.model.norm.target_scale]),
                         params=False)
        dx = dx / self.model.norm.scale
        for j in range(arch.H_p):
            k = t - arch.H_p + 1 + j
            if k >= 0:
                gp[k] += dx[j]
        for j in range(arch.H_c):
            m = t - arch.H_c + 1 + j
            if m >= 0:
                gu[m] += dx[arch.H_p + j]

    def backward(self, grad_pressures, grad_controls=None) -> Tuple[np.ndarray, np.ndarray]:
        """
        开环反向传播

        Args:
            grad_pressures: 损失对 p_0..p_n 的直接梯度
            grad_controls: 损失对 u_0..u_{n-1} 的直接梯度（可选）

        Returns:
            (对 p_0..p_n 的总梯度, 对 u_0..u_{n-1} 的总梯度)
        """
        gp = np.array(grad_pressures, dtype=np.float64)
        n = len(self.controls)
        gu = np.zeros(n) if grad_controls is None else np.array(grad_controls, dtype=np.float64)
        for t in reversed(range(n)):
            self.backward_step(t, gp, gu)
        return gp, gu


def simulate_episode(model: SimulatorModel, controls: Sequence[float], p0: float,
                     context: Optional[Sequence[float]] = None) -> np.ndarray:
    """
    开环展开模拟器

    Args:
        model: 模拟器
        controls: 控制序列 u_0..u_{n-1}
        p0: 吸气开始时的压力
        context: 回合开始前的压力（旧→新）；None 表示无上下文

    Returns:
        压力序列 p_0..p_n（长度 n+1）；p_{t+1} 只依赖 u_0..u_t
    """
    roll = SimulatorRollout(model, p0, context=context)
    for u in controls:
        roll.step(u)
    return np.array(roll.pressures)


def rollout(model: SimulatorModel, controls: Sequence[float], p0: float,
            context: Optional[Sequence[float]] = None) -> SimulatorRollout:
    """与 simulate_episode 相同，但保留 Tape 以便反向传播"""
    roll = SimulatorRollout(model, p0, record=True, context=context)
    for u in controls:
        roll.step(u)
    return roll


def split_episodes(episodes: Sequence[Episode], fraction: float,
                   rng: np.random.Generator) -> Tuple[List[Episode], List[Episode], List[int]]:
    """按回合随机划分训练集和留出集，返回 (训练, 留出, 留出下标)"""
    n = len(episodes)
    n_held = int(round(fraction * n)) if n >= 2 else 0
    if n >= 2 and fraction > 0:
        n_held = min(max(n_held, 1), n - 1)
    order = rng.permutation(n)
    held = sorted(int(i) for i in order[:n_held])
    held_set = set(held)
    train = [ep for i, ep in enumerate(episodes) if i not in held_set]
    return train, [episodes[i] for i in held], held


def _fit_network(net: Mlp, data: RegressionSet, norm: Normalization, hyper: SimHyper,
                 rng: np.random.Generator, label: str) -> List[float]:
    x = norm.apply(data.inputs)
    y = (data.targets - norm.target_mean) / norm.target_scale
    n = len(y)
    losses: List[float] = []
    for epoch in range(hyper.epochs):
        lr = cosine_lr(hyper.lr, epoch, hyper.epochs)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            pred, tape = forward(net, x[idx])
            resid = pred[:, 0] - y[idx]
            total += float(resid @ resid)
            _, grads = backward(net, tape, (2.0 / len(idx)) * resid[:, np.newaxis])
            sgd_step(net, grads, lr, hyper.weight_decay)
        loss = total / n
        if not math.isfinite(loss):
            raise DivergentLoss(epoch, loss, losses[0] if losses else loss)
        losses.append(loss)
        logger.debug(f"{label} epoch {epoch}: mse={loss:.6f} lr={lr:.5f}")
    return losses


def train_simulator(episodes: Sequence[Episode], arch: SimArch, hyper: Optional[SimHyper] = None,
                    seed: int = 0, setting: Optional[LungSetting] = None) -> SimulatorModel:
    """
    训练模拟器：按回合 80/20 划分，每个子网络用小批量 SGD 最小化均方误差

    Args:
        episodes: 探索数据集
        arch: 结构
        hyper: 训练超参数
        seed: 随机种子（划分、打乱和初始化）
        setting: 所属肺设置

    Returns:
        模拟器（training 字段包含损失曲线和留出集 MAE）

    Raises:
        DegenerateData: 某个子网络没有训练样本，或数据中有非有限值
        EpisodeTooShort: 没有可用的转移
    """
    hyper = hyper or SimHyper()
    if not episodes:
        raise DegenerateData("数据集为空")
    rng = derive_rng(seed, 'simulator')
    train_eps, heldout_eps, heldout_index = split_episodes(episodes, hyper.heldout_fraction, rng)
    sets = build_regression_sets(train_eps, arch.featurization, arch.N_B)
    stacked = sets.stacked()
    if not (np.all(np.isfinite(stacked.inputs)) and np.all(np.isfinite(stacked.targets))):
        raise DegenerateData("训练数据包含非有限值")
    norm = Normalization.fit(stacked.inputs, stacked.targets)

    labels = [f"boundary{i}" for i in range(arch.N_B)] + ["general"]
    report = SimTrainingReport(heldout_index=heldout_index, n_train=len(train_eps))
    nets: List[Mlp] = []
    for i, (label, data) in enumerate(zip(labels, sets.all_sets())):
        if len(data) == 0:
            raise DegenerateData(f"子网络 {label} 没有训练样本（N_B={arch.N_B} 相对回合长度过大）")
        net = Mlp(arch.widths, seed=derive_seed(seed, 'simulator', 'init', i), zero_output=True)
        report.losses[label] = _fit_network(net, data, norm, hyper, derive_rng(seed, 'simulator', 'shuffle', i),
                                            label)
        nets.append(net)

    model = SimulatorModel(arch=arch, norm=norm, boundary=nets[:-1], general=nets[-1], setting=setting,
                           training=report)
    if heldout_eps:
        report.heldout_mae = open_loop_mae(model, heldout_eps)
    where = setting.key if setting else "模拟器"
    mae = f"{report.heldout_mae:.4f}" if report.heldout_mae is not None else "n/a"
    logger.info(f"{where} 训练完成: 训练回合 {len(train_eps)}，留出回合 {len(heldout_eps)}，留出 MAE {mae}")
    return model


def open_loop_errors(model: SimulatorModel, episodes: Sequence[Episode]) -> List[np.ndarray]:
    """每个回合按记录的控制量开环展开，返回逐步绝对误差 |p_sim - p_lung|（不含 p_0）"""
    errors: List[np.ndarray] = []
    for ep in episodes:
        if len(ep) < 2:
            continue
        sim = simulate_episode(model, ep.controls[:-1], float(ep.pressures[0]), ep.context)
        errors.append(np.abs(sim[1:] - ep.pressures[1:]))
    return errors


def open_loop_mae(model: SimulatorModel, episodes: Sequence[Episode]) -> float:
    """
    留出回合上的开环平均绝对误差

    Raises:
        DegenerateData: 没有可评估的步
    """
    errors = open_loop_errors(model, episodes)
    if not errors:
        raise DegenerateData("没有可用于开环评估的回合")
    return float(np.mean(np.concatenate(errors)))


class OpenLoopSystem(Protocol):
    """开环距离用的系统接口：reset 返回初始压力，step 在自身状态上推进一步"""

    def reset(self) -> float:
        ...

    def step(self, u: float) -> float:
        ...


class PlantSystem:
    """把真实被控对象包装为开环系统（每次 reset 新建对象）"""

    def __init__(self, factory: PlantFactory):
        self.factory = factory
        self.plant: Optional[Plant] = None

    def reset(self) -> float:
        self.plant = self.factory()
        return self.plant.measured

    def step(self, u: float) -> float:
        return self.plant.step(u)


class SimulatorSystem:
    """把模拟器包装为开环系统（从静息状态开始展开）"""

    def __init__(self, model: SimulatorModel, p0: float = 5.0):
        self.model = model
        self.p0 = p0
        self._roll: Optional[SimulatorRollout] = None

    def reset(self) -> float:
        self._roll = SimulatorRollout(self.model, self.p0, context=resting_context(self.model, self.p0))
        return self.p0

    def step(self, u: float) -> float:
        return self._roll.step(u)


class ControlDistribution(Protocol):
    def sample(self, rng: np.random.Generator, T: int) -> np.ndarray:
        ...


class EpisodeControls:
    """探索策略的控制序列分布：从数据集中随机取一个回合的前 T 个控制量"""

    def __init__(self, episodes: Sequence[Episode]):
        self.episodes = list(episodes)

    def sample(self, rng: np.random.Generator, T: int) -> np.ndarray:
        candidates = [ep for ep in self.episodes if len(ep) >= T]
        if not candidates:
            raise ValueError(f"没有长度 >= {T} 的回合")
        return np.array(candidates[int(rng.integers(len(candidates)))].controls[:T], dtype=np.float64)


@dataclass
class OpenLoopStats:
    mean: float
    stderr: float
    per_step: np.ndarray


def open_loop_distance_stats(sys1: OpenLoopSystem, sys2: OpenLoopSystem, dist: ControlDistribution, T: int,
                             n_samples: int, rng: np.random.Generator) -> OpenLoopStats:
    """
    开环距离的蒙特卡洛估计：E_u[Σ_t |f1(x_t1, u_t) - f2(x_t2, u_t)|]，两个系统各自演化

    Args:
        sys1, sys2: 两个系统实例；同一个实例时距离为 0
        dist: 控制序列分布
        T: 展开步数
        n_samples: 采样次数
        rng: 采样用随机数生成器

    Returns:
        均值、标准误和逐步平均距离
    """
    if T < 1 or n_samples < 1:
        raise ValueError(f"T 和 n_samples 必须 >= 1: T={T}, n_samples={n_samples}")
    if sys1 is sys2:
        return OpenLoopStats(mean=0.0, stderr=0.0, per_step=np.zeros(T))
    totals = np.empty(n_samples)
    per_step = np.zeros(T)
    for s in range(n_samples):
        controls = dist.sample(rng, T)
        sys1.reset()
        sys2.reset()
        d = np.empty(T)
        for t in range(T):
            d[t] = abs(sys1.step(float(controls[t])) - sys2.step(float(controls[t])))
        totals[s] = d.sum()
        per_step += d
    stderr = float(totals.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
    return OpenLoopStats(mean=float(totals.mean()), stderr=stderr, per_step=per_step / n_samples)


def open_loop_distance(sys1: OpenLoopSystem, sys2: OpenLoopSystem, dist: ControlDistribution, T: int,
                       n_samples: int, rng: np.random.Generator) -> float:
    return open_loop_distance_stats(sys1, sys2, dist, T, n_samples, rng).mean


def compare_trajectory(model: SimulatorModel, plant: Plant, controls: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """同一控制序列下的真实压力与模拟压力（被控对象会先重置）"""
    plant.reset()
    true = [plant.measured]
    for u in controls:
        true.append(plant.step(float(u)))
    return np.array(true), simulate_episode(model, controls, true[0], resting_context(model, true[0]))


class MetaSimulator:
    """按肺设置分发的模拟器集合"""

    def __init__(self, models: Optional[Sequence[SimulatorModel]] = None):
        self._models: Dict[str, SimulatorModel] = {}
        for model in models or []:
            self.add(model)

    def add(self, model: SimulatorModel) -> None:
        if model.setting is None:
            raise ValueError("加入集合的模拟器必须带有肺设置")
        self._models[model.setting.key] = model

    def for_setting(self, setting: LungSetting) -> SimulatorModel:
        try:
            return self._models[setting.key]
        except KeyError:
            raise KeyError(f"没有 {setting.key} 的模拟器（已有: {', '.join(self._models) or '无'}）")

    def __len__(self) -> int:
        return len(self._models)

    def __iter__(self) -> Iterator[SimulatorModel]:
        return iter(self._models.values())


def architecture_sweep(episodes: Sequence[Episode], base: SimArch, dimension: str, values: Sequence[int],
                       hyper: Optional[SimHyper] = None, seed: int = 0,
                       setting: Optional[LungSetting] = None) -> List[Tuple[int, float]]:
    """
    围绕 base 每次只改变一个结构维度，返回 [(取值, 留出 MAE)]

    Raises:
        ValueError: 未知维度或留出集为空
    """
    if dimension not in ARCH_DIMENSIONS:
        raise ValueError(f"未知的结构维度: {dimension}（可选: {', '.join(ARCH_DIMENSIONS)}）")
    results: List[Tuple[int, float]] = []
    for value in values:
        arch = replace(base, **{dimension: int(value)})
        model = train_simulator(episodes, arch, hyper, seed=seed, setting=setting)
        if model.training.heldout_mae is None:
            raise ValueError("数据集太小，没有留出回合")
        results.append((int(value), model.training.heldout_mae))
        logger.info(f"结构扫描 {dimension}={value}: 留出 MAE {model.training.heldout_mae:.4f}")
    return results


def simulator_to_dict(model: SimulatorModel) -> Dict[str, Any]:
    return {
        'format': SIMULATOR_FORMAT,
        'version': SIMULATOR_FORMAT_VERSION,
        'arch': model.arch.to_dict(),
        'norm': model.norm.to_dict(),
        'setting': model.setting.to_dict() if model.setting else None,
        'boundary': [mlp_to_dict(net) for net in model.boundary],
        'general': mlp_to_dict(model.general),
        'training': model.training.to_dict() if model.training else None,
    }


def simulator_from_dict(data: Dict[str, Any]) -> SimulatorModel:
    if data.get('format') != SIMULATOR_FORMAT:
        raise ValueError(f"不是模拟器数据: {data.get('format')}")
    if data.get('version') != SIMULATOR_FORMAT_VERSION:
        raise ValueError(f"不支持的模拟器版本: {data.get('version')}")
    return SimulatorModel(
        arch=SimArch.from_dict(data['arch']),
        norm=Normalization.from_dict(data['norm']),
        boundary=[mlp_from_dict(d) for d in data['boundary']],
        general=mlp_from_dict(data['general']),
        setting=LungSetting.from_dict(data['setting']) if data.get('setting') else None,
        training=SimTrainingReport.from_dict(data['training']) if data.get('training') else None,
    )


def save_simulator(path: Union[str, Path], model: SimulatorModel) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(simulator_to_dict(model), f)


def load_simulator(path: Union[str, Path]) -> SimulatorModel:
    with open(path, 'r', encoding='utf-8') as f:
        return simulator_from_dict(json.load(f))
