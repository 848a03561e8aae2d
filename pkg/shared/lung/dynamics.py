"""
肺-呼吸机动力学 - 真实系统（地面真值）

包含：
- 两种被控对象：双气球物理模型（非线性）与线性 RC 单腔模型
- 目标压力波形
- 吸气阀门流量
- 呼吸运行循环（吸气由控制器决定，呼气为固定的指数衰减）以及吸气回合切分
- 轨迹的 JSONL 持久化
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Protocol, Sequence, Union

import numpy as np

from shared.utils.errors import EmptyTrajectory, NonPositiveVolume, SafetyAbort

logger = logging.getLogger(__name__)

# 常量定义
INSPIRATORY = "in"
EXPIRATORY = "ex"
ISO_RESISTANCES = (5.0, 20.0, 50.0)  # cmH2O/L/s
ISO_COMPLIANCES = (10.0, 20.0, 50.0)  # mL/cmH2O
DEFAULT_PIPS = (10.0, 15.0, 20.0, 25.0, 30.0, 35.0)
REST_VOLUME_ML = 300.0
# 半径以升为体积单位计算，r0 对应 300 mL 的静息容积
DEFAULT_R0 = (3.0 * (REST_VOLUME_ML / 1000.0) / (4.0 * math.pi)) ** (1.0 / 3.0)
DEFAULT_P_SUPPLY = 60.0
# 阀门全开时，在 PEEP 下给出满量程流量 100 单位 × 20 mL/s
DEFAULT_K_VALVE = (DEFAULT_P_SUPPLY - 5.0) / 2000.0
TRAJECTORY_FORMAT = "ventbench-trajectory"


@dataclass(frozen=True)
class LungSetting:
    """
    肺设置：ISO 阻力/顺应性以及物理模型的潜在常数

    Attributes:
        R: 气道阻力，cmH2O/L/s
        C: 顺应性，mL/cmH2O
        p0: 基线压力，cmH2O
        r0: 静息半径（任意长度单位）
        p_supply: 气源压力，cmH2O
        k_valve: 阀门阻力系数（R_in = k_valve / d^4）
    """
    R: float
    C: float
    p0: float = 5.0
    r0: float = DEFAULT_R0
    p_supply: float = DEFAULT_P_SUPPLY
    k_valve: float = DEFAULT_K_VALVE

    def __post_init__(self):
        if self.R <= 0 or self.C <= 0:
            raise ValueError(f"R 和 C 必须为正数: R={self.R}, C={self.C}")
        if not self.p_supply > self.p0 > 0:
            raise ValueError(f"需要 p_supply > p0 > 0: p_supply={self.p_supply}, p0={self.p0}")
        if self.r0 <= 0 or self.k_valve <= 0:
            raise ValueError(f"r0 和 k_valve 必须为正数: r0={self.r0}, k_valve={self.k_valve}")

    @property
    def key(self) -> str:
        return f"R{self.R:g}_C{self.C:g}"

    @property
    def is_iso(self) -> bool:
        return self.R in ISO_RESISTANCES and self.C in ISO_COMPLIANCES

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'LungSetting':
        return cls(**{k: float(v) for k, v in data.items()})


def iso_setting(R: float, C: float) -> LungSetting:
    """按 ISO 命名的阻力/顺应性创建肺设置"""
    if R not in ISO_RESISTANCES or C not in ISO_COMPLIANCES:
        raise ValueError(f"不是 ISO 设置: R={R}, C={C}")
    return LungSetting(R=float(R), C=float(C))


# 六个标准设置
ISO_SETTINGS = tuple(iso_setting(R, C) for R in (5.0, 20.0) for C in (10.0, 20.0, 50.0))


@dataclass(frozen=True)
class Waveform:
    """
    目标压力波形（方波：吸气段为 PIP，呼气段为 PEEP）

    Attributes:
        pip: 吸气峰压，cmH2O
        peep: 呼气末正压，cmH2O
        t_insp: 吸气时长，s
        t_exp: 呼气时长，s
        dt: 时间步长，s
    """
    pip: float
    peep: float = 5.0
    t_insp: float = 1.0
    t_exp: float = 2.0
    dt: float = 0.03

    def __post_init__(self):
        if not self.pip > self.peep >= 0:
            raise ValueError(f"需要 pip > peep >= 0: pip={self.pip}, peep={self.peep}")
        if self.t_insp <= 0 or self.t_exp <= 0 or self.dt <= 0:
            raise ValueError("t_insp, t_exp, dt 必须为正数")
        n = self.period / self.dt
        if abs(n - round(n)) > 1e-6:
            raise ValueError(f"呼吸周期 {self.period}s 不是 dt={self.dt}s 的整数倍")

    @property
    def period(self) -> float:
        return self.t_insp + self.t_exp

    @property
    def steps_per_breath(self) -> int:
        return int(round(self.period / self.dt))

    @property
    def key(self) -> str:
        return f"pip{self.pip:g}"

    def is_inspiratory(self, t: float) -> bool:
        return math.fmod(t, self.period) < self.t_insp

    def inspiratory_step(self, k: int) -> bool:
        """周期内第 k 步是否处于吸气段（用整数步号避免浮点取模误差）"""
        return (k % self.steps_per_breath) * self.dt < self.t_insp

    @property
    def inspiratory_steps(self) -> int:
        return sum(1 for k in range(self.steps_per_breath) if self.inspiratory_step(k))

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Waveform':
        return cls(**{k: float(v) for k, v in data.items()})


def waveform_target(t: float, wf: Waveform) -> float:
    """
    目标压力：周期内 t < t_insp 时为 PIP，否则为 PEEP

    Args:
        t: 时间，s（t >= 0）
        wf: 波形

    Returns:
        目标压力，cmH2O
    """
    if t < 0:
        raise ValueError(f"时间不能为负: {t}")
    return wf.pip if wf.is_inspiratory(t) else wf.peep


def pip_waveforms(pips: Sequence[float] = DEFAULT_PIPS, peep: float = 5.0, t_insp: float = 1.0,
                  t_exp: float = 2.0, dt: float = 0.03) -> List[Waveform]:
    """评分用的一组波形（PEEP 与呼吸频率相同，PIP 不同）"""
    return [Waveform(pip=float(p), peep=peep, t_insp=t_insp, t_exp=t_exp, dt=dt) for p in pips]


@dataclass(frozen=True)
class DynamicsConfig:
    """
    被控对象的公共配置

    Attributes:
        dt: 时间步长，s
        peep_reference: RC 模型在空肺、零流量时的压力，cmH2O
        p_max: 压力安全上限，cmH2O
        v_max: 容积安全上限，mL
        flow_per_unit: 每个控制单位对应的流量，mL/s
        u_max: 控制量上限
        noise: 是否在观测压力上叠加高斯噪声
        noise_sigma: 噪声标准差，cmH2O
    """
    dt: float = 0.03
    peep_reference: float = 5.0
    p_max: float = 70.0
    v_max: float = 3000.0
    flow_per_unit: float = 20.0
    u_max: float = 100.0
    noise: bool = False
    noise_sigma: float = 0.05

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class PlantState:
    """被控对象状态：容积 v（mL）、压力 p（cmH2O）、时间 t（s）、相位"""
    v: float
    p: float
    t: float = 0.0
    phase: str = INSPIRATORY


def balloon_pressure(v: float, ls: LungSetting) -> float:
    """双气球模型的压力-容积关系（容积单位 mL，半径按升计算）"""
    r = (3.0 * (v / 1000.0) / (4.0 * math.pi)) ** (1.0 / 3.0)
    return ls.p0 + (1.0 - (r / ls.r0) ** 6) / (r * ls.r0 ** 2)


def balloon_rest_volume(ls: LungSetting) -> float:
    """半径等于 r0 时的容积（此时压力为 p0），mL"""
    return 4.0 / 3.0 * math.pi * ls.r0 ** 3 * 1000.0


def balloon_step(state: PlantState, u: float, dt: float, ls: LungSetting) -> PlantState:
    """
    双气球模型单步：v' = v + u·dt，压力由新半径计算

    Args:
        state: 当前状态
        u: 流量，mL/s
        dt: 时间步长，s
        ls: 肺设置

    Returns:
        新状态

    Raises:
        NonPositiveVolume: v + u·dt <= 0
    """
    v = state.v + u * dt
    if v <= 0:
        raise NonPositiveVolume(f"气球容积非正: v={v:.4f} mL (t={state.t:.3f}s)")
    return PlantState(v=v, p=balloon_pressure(v, ls), t=state.t + dt, phase=state.phase)


def rc_step(state: PlantState, u: float, dt: float, ls: LungSetting,
            peep_reference: float = 5.0) -> PlantState:
    """
    线性 RC 模型单步：p' = peep_reference + v'/C + R·u

    容积 v 是高于参考静息容积的部分，因此 v = 0 是合法的空肺状态。
    u 以 mL/s 计，R 以 cmH2O/(L/s) 计，所以阻力项为 R·u/1000。

    Raises:
        NonPositiveVolume: v + u·dt < 0
    """
    v = state.v + u * dt
    if v < 0:
        raise NonPositiveVolume(f"RC 容积为负: v={v:.4f} mL (t={state.t:.3f}s)")
    p = peep_reference + v / ls.C + ls.R * u / 1000.0
    return PlantState(v=v, p=p, t=state.t + dt, phase=state.phase)


def valve_flow(p_lung: float, d_opening: float, ls: LungSetting) -> float:
    """
    吸气阀流量：(p_supply - p_lung)·d^4 / k_valve，不允许回流

    Args:
        p_lung: 肺压，cmH2O
        d_opening: 阀门开度，[0, 1]
        ls: 肺设置

    Returns:
        流量，mL/s
    """
    if not 0.0 <= d_opening <= 1.0:
        raise ValueError(f"阀门开度必须在 [0, 1] 内: {d_opening}")
    return max(0.0, (ls.p_supply - p_lung) * d_opening ** 4 / ls.k_valve)


def expiratory_time_constant(ls: LungSetting) -> float:
    """呼气时间常数 τ = R·C（C 换算为 L/cmH2O），s"""
    return ls.R * ls.C / 1000.0


class Controller(Protocol):
    """吸气段控制器协议：每次吸气开始时 reset，之后每步给出控制量"""

    def reset(self) -> None:
        ...

    def control(self, target: float, measured: float, t: float) -> float:
        ...


class ZeroController:
    """永远输出 0"""

    def reset(self) -> None:
        pass

    def control(self, target: float, measured: float, t: float) -> float:
        return 0.0


class ConstantController:
    def __init__(self, u: float):
        self.u = float(u)

    def reset(self) -> None:
        pass

    def control(self, target: float, measured: float, t: float) -> float:
        return self.u


class Plant:
    """
    被控对象基类 - 有状态、单一所有者，自带随机数生成器（观测噪声）

    子类实现 _advance（吸气步）、pressure_at（零流量压力）和 peep_volume（呼气目标容积）。
    """

    kind = "base"

    def __init__(self, setting: LungSetting, cfg: Optional[DynamicsConfig] = None, seed: int = 0):
        self.setting = setting
        self.cfg = cfg or DynamicsConfig()
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self.state = self.initial_state()
        self.measured = self.observe()

    def initial_state(self) -> PlantState:
        v = self.peep_volume(self.cfg.peep_reference)
        return PlantState(v=v, p=self.pressure_at(v), t=0.0, phase=INSPIRATORY)

    def reset(self):
        """回到静息状态（噪声生成器不重置）"""
        self.state = self.initial_state()
        self.measured = self.observe()

    def _advance(self, state: PlantState, flow: float) -> PlantState:
        raise NotImplementedError

    def pressure_at(self, v: float) -> float:
        raise NotImplementedError

    def peep_volume(self, peep: float) -> float:
        raise NotImplementedError

    def observe(self) -> float:
        """传感器读数（可选高斯噪声，截断到非负）"""
        p = self.state.p
        if self.cfg.noise:
            p += float(self._rng.normal(0.0, self.cfg.noise_sigma))
        return max(p, 0.0)

    def step(self, u: float) -> float:
        """
        吸气步：控制量 u（控制单位）换算为流量后推进一步

        Returns:
            新的观测压力

        Raises:
            SafetyAbort: 压力或容积超过上限
        """
        flow = u * self.cfg.flow_per_unit
        state = self._advance(replace(self.state, phase=INSPIRATORY), flow)
        self.state = state
        self._check_safety()
        self.measured = self.observe()
        return self.measured

    def exhale(self, peep: float) -> float:
        """呼气步：容积以 τ = R·C 向 PEEP 对应容积指数衰减"""
        target = self.peep_volume(peep)
        decay = math.exp(-self.cfg.dt / expiratory_time_constant(self.setting))
        v = target + (self.state.v - target) * decay
        self.state = PlantState(v=v, p=self.pressure_at(v), t=self.state.t + self.cfg.dt, phase=EXPIRATORY)
        self.measured = self.observe()
        return self.measured

    def _check_safety(self):
        if self.state.p > self.cfg.p_max:
            raise SafetyAbort(self.state.t, self.state.p, reason="pressure")
        if self.state.v > self.cfg.v_max:
            raise SafetyAbort(self.state.t, self.state.p, reason="volume")


class RcPlant(Plant):
    """线性 RC 单腔肺（所有基准实验的地面真值）"""

    kind = "rc"

    def _advance(self, state: PlantState, flow: float) -> PlantState:
        return rc_step(state, flow, self.cfg.dt, self.setting, self.cfg.peep_reference)

    def pressure_at(self, v: float) -> float:
        return self.cfg.peep_reference + v / self.setting.C

    def peep_volume(self, peep: float) -> float:
        return max(self.setting.C * (peep - self.cfg.peep_reference), 0.0)


class BalloonPlant(Plant):
    """双气球物理模型（非线性，用于模拟器保真度压力测试）"""

    kind = "balloon"

    def _advance(self, state: PlantState, flow: float) -> PlantState:
        return balloon_step(state, flow, self.cfg.dt, self.setting)

    def pressure_at(self, v: float) -> float:
        return balloon_pressure(v, self.setting)

    def peep_volume(self, peep: float) -> float:
        # 气球模型的潜在常数欠定，呼气统一回到静息容积（压力 p0）
        return balloon_rest_volume(self.setting)


PLANT_TYPES = {RcPlant.kind: RcPlant, BalloonPlant.kind: BalloonPlant}


def make_plant(kind: str, setting: LungSetting, cfg: Optional[DynamicsConfig] = None, seed: int = 0) -> Plant:
    """按类型名创建被控对象"""
    try:
        plant_cls = PLANT_TYPES[kind]
    except KeyError:
        raise ValueError(f"未知的被控对象类型: {kind}（可选: {', '.join(PLANT_TYPES)}）")
    return plant_cls(setting, cfg, seed)


@dataclass(frozen=True)
class PlantFactory:
    """可序列化的被控对象工厂（供并行进程使用）"""
    setting: LungSetting
    kind: str = "rc"
    cfg: DynamicsConfig = field(default_factory=DynamicsConfig)
    seed: int = 0

    def __call__(self) -> Plant:
        return make_plant(self.kind, self.setting, self.cfg, self.seed)


@dataclass(frozen=True)
class Sample:
    t: float
    u: float
    p: float
    phase: str


@dataclass
class Trajectory:
    """
    轨迹：时间对齐的 (t, u, p, phase) 序列

    样本 k 的压力 p_k 是在施加 u_k 之前测得的。meta["lead"] 可记录轨迹开始之前测得的压力（旧→新），
    切分回合时作为第一个回合的前置上下文。
    """
    samples: List[Sample]
    setting: LungSetting
    waveform: Waveform
    meta: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.samples])

    @property
    def controls(self) -> np.ndarray:
        return np.array([s.u for s in self.samples])

    @property
    def pressures(self) -> np.ndarray:
        return np.array([s.p for s in self.samples])

    @property
    def targets(self) -> np.ndarray:
        return np.array([self.waveform.pip if s.phase == INSPIRATORY else self.waveform.peep
                         for s in self.samples])


@dataclass
class Episode:
    """
    吸气回合：一个吸气段的样本，外加其之前的若干压力作为热启动上下文

    Attributes:
        pressures: 压力序列（p_0 为吸气开始时的测量值）
        controls: 控制序列
        targets: 目标压力序列
        times: 时间戳
        context: 吸气段之前的压力（旧→新）
        breath: 在所属轨迹中的序号
        policy: 采集该回合时使用的探索策略（非探索数据为 None）
    """
    pressures: np.ndarray
    controls: np.ndarray
    targets: np.ndarray
    times: np.ndarray
    context: np.ndarray
    breath: int = 0
    policy: Optional[str] = None

    def __len__(self) -> int:
        return len(self.pressures)


def run_breath(plant: Plant, controller: Controller, wf: Waveform, n_breaths: int = 1) -> Trajectory:
    """
    运行若干次完整呼吸

    吸气段由控制器决定 u（截断到 [0, u_max]），每次吸气开始时重置控制器；
    呼气段 u = 0，由呼气阀以固定指数衰减排气至 PEEP。

    Args:
        plant: 被控对象（不会被重置，状态从当前值继续）
        controller: 吸气控制器
        wf: 目标波形
        n_breaths: 呼吸次数

    Returns:
        轨迹

    Raises:
        SafetyAbort: 压力超过安全上限
    """
    if n_breaths < 1:
        raise ValueError(f"n_breaths 必须 >= 1: {n_breaths}")
    if abs(wf.dt - plant.cfg.dt) > 1e-12:
        raise ValueError(f"波形步长 {wf.dt} 与被控对象步长 {plant.cfg.dt} 不一致")

    u_max = plant.cfg.u_max
    t0 = plant.state.t
    samples: List[Sample] = []
    p = plant.measured
    was_inspiratory = False
    for k in range(n_breaths * wf.steps_per_breath):
        k_breath = k % wf.steps_per_breath
        t = t0 + k * wf.dt
        if wf.inspiratory_step(k):
            if not was_inspiratory:
                controller.reset()
            u = float(np.clip(controller.control(wf.pip, p, k_breath * wf.dt), 0.0, u_max))
            samples.append(Sample(t=t, u=u, p=p, phase=INSPIRATORY))
            p = plant.step(u)
            was_inspiratory = True
        else:
            samples.append(Sample(t=t, u=0.0, p=p, phase=EXPIRATORY))
            p = plant.exhale(wf.peep)
            was_inspiratory = False
    return Trajectory(samples=samples, setting=plant.setting, waveform=wf)


def episode_split(traj: Trajectory, context: int = 10) -> List[Episode]:
    """
    把轨迹切分为吸气回合（最大连续吸气段），丢弃呼气样本

    Args:
        traj: 带相位标签的轨迹
        context: 保留的前置压力个数（可以来自 meta["lead"]）

    Returns:
        回合列表

    Raises:
        EmptyTrajectory: 轨迹为空
    """
    if not traj.samples:
        raise EmptyTrajectory("轨迹为空，无法切分")
    samples = traj.samples
    policy = traj.meta.get('policy')
    lead = [float(p) for p in traj.meta.get('lead', [])]
    pressures = lead + [s.p for s in samples]
    episodes: List[Episode] = []
    i, n = 0, len(samples)
    while i < n:
        if samples[i].phase != INSPIRATORY:
            i += 1
            continue
        j = i
        while j < n and samples[j].phase == INSPIRATORY:
            j += 1
        run = samples[i:j]
        k = len(lead) + i
        ctx = pressures[max(0, k - context):k] if context > 0 else []
        episodes.append(Episode(
            pressures=np.array([s.p for s in run]),
            controls=np.array([s.u for s in run]),
            targets=np.full(len(run), traj.waveform.pip),
            times=np.array([s.t for s in run]),
            context=np.array(ctx, dtype=float),
            breath=len(episodes),
            policy=policy,
        ))
        i = j
    return episodes


def save_trajectories(path: Union[str, Path], trajectories: Iterable[Trajectory]) -> int:
    """
    以 JSONL 保存轨迹：每条轨迹一行头部（设置、波形、元数据），随后每个样本一行

    Returns:
        写入的轨迹条数
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, 'w', encoding='utf-8') as f:
        for traj in trajectories:
            header = {
                'type': 'header',
                'format': TRAJECTORY_FORMAT,
                'setting': traj.setting.to_dict(),
                'waveform': traj.waveform.to_dict(),
                'meta': traj.meta,
                'n_samples': len(traj.samples),
            }
            f.write(json.dumps(header, ensure_ascii=False, sort_keys=True) + '\n')
            for s in traj.samples:
                f.write(json.dumps({'t': s.t, 'u': s.u, 'p': s.p, 'phase': s.phase}) + '\n')
            count += 1
    logger.debug(f"已保存 {count} 条轨迹到 {path}")
    return count


def load_trajectories(path: Union[str, Path]) -> List[Trajectory]:
    """读取 save_trajectories 写出的 JSONL 文件"""
    trajectories: List[Trajectory] = []
    current: Optional[Trajectory] = None
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if record.get('type') == 'header':
                if record.get('format') != TRAJECTORY_FORMAT:
                    raise ValueError(f"{path}:{line_no} 不是轨迹文件头: {record.get('format')}")
                current = Trajectory(samples=[], setting=LungSetting.from_dict(record['setting']),
                                     waveform=Waveform.from_dict(record['waveform']),
                                     meta=record.get('meta', {}))
                trajectories.append(current)
            elif current is None:
                raise ValueError(f"{path}:{line_no} 样本出现在文件头之前")
            else:
                current.samples.append(Sample(t=record['t'], u=record['u'], p=record['p'], phase=record['phase']))
    return trajectories
