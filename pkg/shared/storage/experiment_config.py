"""
实验配置 - 从 JSON 文件加载、逐字段校验，并按 命令行 > 环境变量 > 配置文件 > 默认值 合并覆盖项
"""
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from shared.learning.policy import AnalyticHyper, ReinforceHyper
from shared.learning.simlearn import ARCH_DIMENSIONS, ISO_SIM_ARCH, SimArch, SimHyper
from shared.lung.dynamics import PLANT_TYPES, DynamicsConfig, LungSetting, Waveform, pip_waveforms
from shared.lung.explore import ISO_EXPLORATION, ExplorationConfig
from shared.lung.pid import GridSpec, PidCoefficients
from shared.utils.errors import ConfigInvalid

logger = logging.getLogger(__name__)

# 常量定义
ENV_OUT = 'VENTBENCH_OUT'
ENV_JOBS = 'VENTBENCH_JOBS'
HASH_LENGTH = 12
# 不参与配置哈希的字段
UNHASHED_KEYS = ('output_dir', 'jobs')


@dataclass(frozen=True)
class WaveformSpec:
    pips: Tuple[float, ...] = (10.0, 15.0, 20.0, 25.0, 30.0, 35.0)
    peep: float = 5.0
    t_insp: float = 1.0
    t_exp: float = 2.0

    def waveforms(self, dt: float) -> List[Waveform]:
        return pip_waveforms(self.pips, self.peep, self.t_insp, self.t_exp, dt)


@dataclass(frozen=True)
class DatasetSpec:
    """探索数据集：每个波形 breaths 次呼吸，每个回合保留 context 个前置压力"""
    breaths: int = 500
    context: int = 10


@dataclass(frozen=True)
class OpenLoopSpec:
    horizon: int = 29
    samples: int = 200


@dataclass(frozen=True)
class ControllerSpec:
    """残差控制器结构与解析训练参数"""
    lam: float = 0.1
    lambda_sweep: Tuple[float, ...] = (0.01, 0.1, 1.0)
    window: int = 5
    depth: int = 2
    width: int = 32
    hyper: AnalyticHyper = field(default_factory=AnalyticHyper)


@dataclass(frozen=True)
class BalloonSpec:
    enabled: bool = True
    breaths: int = 100


@dataclass(frozen=True)
class SettingSpec:
    setting: LungSetting
    exploration: ExplorationConfig
    arch: SimArch


@dataclass(frozen=True)
class ExperimentConfig:
    """
    一次实验的完整配置

    Attributes:
        name: 实验名
        seed: 主种子（全部随机性的来源）
        output_dir: 输出目录
        jobs: 设置级并行进程数
        plant_kind: 地面真值被控对象类型
        dynamics: 被控对象公共配置
        waveform: 评分/训练波形
        grid: PID 网格
        dataset: 探索数据集规模
        simulator: 模拟器训练参数
        open_loop: 开环距离估计参数
        controller: 残差控制器参数
        baseline: REINFORCE 基线参数
        balloon: 气球模型压力测试
        settings: 各肺设置的探索参数与模拟器结构
    """
    name: str
    seed: int
    output_dir: str
    settings: Tuple[SettingSpec, ...]
    jobs: int = 1
    plant_kind: str = "rc"
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    waveform: WaveformSpec = field(default_factory=WaveformSpec)
    grid: GridSpec = field(default_factory=GridSpec)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    simulator: SimHyper = field(default_factory=SimHyper)
    open_loop: OpenLoopSpec = field(default_factory=OpenLoopSpec)
    controller: ControllerSpec = field(default_factory=ControllerSpec)
    baseline: ReinforceHyper = field(default_factory=ReinforceHyper)
    balloon: BalloonSpec = field(default_factory=BalloonSpec)

    def waveforms(self) -> List[Waveform]:
        return self.waveform.waveforms(self.dynamics.dt)

    def to_dict(self) -> Dict[str, Any]:
        """规范化字典（配置哈希和运行清单都基于它）"""
        return {
            'name': self.name,
            'seed': self.seed,
            'output_dir': self.output_dir,
            'jobs': self.jobs,
            'plant': dict(self.dynamics.to_dict(), kind=self.plant_kind),
            'waveform': {'pips': list(self.waveform.pips), 'peep': self.waveform.peep,
                         't_insp': self.waveform.t_insp, 't_exp': self.waveform.t_exp},
            'grid': {'kp': list(self.grid.kp), 'ki': list(self.grid.ki), 'kd': list(self.grid.kd)},
            'dataset': {'breaths': self.dataset.breaths, 'context': self.dataset.context},
            'simulator': dict(self.simulator.to_dict(), open_loop_horizon=self.open_loop.horizon,
                              open_loop_samples=self.open_loop.samples),
            'controller': {
                'lambda': self.controller.lam,
                'lambda_sweep': list(self.controller.lambda_sweep),
                'window': self.controller.window,
                'depth': self.controller.depth,
                'width': self.controller.width,
                'epochs': self.controller.hyper.epochs,
                'lr': self.controller.hyper.lr,
                'weight_decay': self.controller.hyper.weight_decay,
                'clip_norm': self.controller.hyper.clip_norm,
                'score_every': self.controller.hyper.score_every,
                'keep_best': self.controller.hyper.keep_best,
            },
            'baseline': {
                'episodes': self.baseline.episodes,
                'sigma': self.baseline.sigma,
                'lr': self.baseline.lr,
                'weight_decay': self.baseline.weight_decay,
                'baseline_window': self.baseline.baseline_window,
                'clip_norm': self.baseline.clip_norm,
                'score_every': self.baseline.score_every,
            },
            'balloon': {'enabled': self.balloon.enabled, 'breaths': self.balloon.breaths},
            'settings': [
                {'R': s.setting.R, 'C': s.setting.C, 'exploration': s.exploration.to_dict(), 'arch': s.arch.to_dict()}
                for s in self.settings
            ],
        }


def config_hash(cfg: ExperimentConfig) -> str:
    """规范化 JSON（键排序，不含输出目录和并行数）的 SHA-256 前 12 位"""
    data = {k: v for k, v in cfg.to_dict().items() if k not in UNHASHED_KEYS}
    canonical = json.dumps(data, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:HASH_LENGTH]


# ========== 校验工具 ==========

def _section(data: Dict[str, Any], key: str, path: str) -> Dict[str, Any]:
    value = data.get(key, {})
    if not isinstance(value, dict):
        raise ConfigInvalid(f"{path}{key}: 必须是对象")
    return value


def _number(data: Dict[str, Any], key: str, path: str, default: Any = None, minimum: Optional[float] = None,
            strict: bool = False, integer: bool = False, required: bool = False):
    if key not in data:
        if required:
            raise ConfigInvalid(f"{path}{key}: 缺少必填字段")
        return default
    value = data[key]
    if value is None and not required:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigInvalid(f"{path}{key}: 必须是数字，实际为 {value!r}")
    if integer:
        if float(value) != int(value):
            raise ConfigInvalid(f"{path}{key}: 必须是整数，实际为 {value!r}")
        value = int(value)
    else:
        value = float(value)
    if minimum is not None and (value <= minimum if strict else value < minimum):
        relation = '>' if strict else '>='
        raise ConfigInvalid(f"{path}{key}: 必须 {relation} {minimum}，实际为 {value}")
    return value


def _numbers(data: Dict[str, Any], key: str, path: str, default: Sequence[float],
             minimum: Optional[float] = None) -> Tuple[float, ...]:
    if key not in data:
        return tuple(default)
    values = data[key]
    if not isinstance(values, list) or not values:
        raise ConfigInvalid(f"{path}{key}: 必须是非空数组")
    return tuple(_number({'v': v}, 'v', f"{path}{key}[{i}].", minimum=minimum) for i, v in enumerate(values))


def _pair(data: Dict[str, Any], key: str, path: str) -> Tuple[float, float]:
    values = _numbers(data, key, path, default=())
    if len(values) != 2:
        raise ConfigInvalid(f"{path}{key}: 必须是两个数字 [下限, 上限]")
    if values[0] > values[1]:
        raise ConfigInvalid(f"{path}{key}: 下限大于上限 {list(values)}")
    return values[0], values[1]


def _build(path: str, factory, **kwargs):
    """调用 dataclass 构造函数，把它的 ValueError 转为 ConfigInvalid"""
    try:
        return factory(**kwargs)
    except ValueError as e:
        raise ConfigInvalid(f"{path.rstrip('.')}: {e}")


# ========== 各段解析 ==========

def _parse_dynamics(data: Dict[str, Any]) -> Tuple[str, DynamicsConfig]:
    path = 'plant.'
    kind = data.get('kind', 'rc')
    if kind not in PLANT_TYPES:
        raise ConfigInvalid(f"{path}kind: 未知的被控对象类型 {kind!r}（可选: {', '.join(PLANT_TYPES)}）")
    noise = data.get('noise', False)
    if not isinstance(noise, bool):
        raise ConfigInvalid(f"{path}noise: 必须是布尔值")
    d = DynamicsConfig()
    cfg = DynamicsConfig(
        dt=_number(data, 'dt', path, d.dt, minimum=0, strict=True),
        peep_reference=_number(data, 'peep_reference', path, d.peep_reference, minimum=0),
        p_max=_number(data, 'p_max', path, d.p_max, minimum=0, strict=True),
        v_max=_number(data, 'v_max', path, d.v_max, minimum=0, strict=True),
        flow_per_unit=_number(data, 'flow_per_unit', path, d.flow_per_unit, minimum=0, strict=True),
        u_max=_number(data, 'u_max', path, d.u_max, minimum=0, strict=True),
        noise=noise,
        noise_sigma=_number(data, 'noise_sigma', path, d.noise_sigma, minimum=0),
    )
    return kind, cfg


def _parse_waveform(data: Dict[str, Any], dt: float) -> WaveformSpec:
    path = 'waveform.'
    d = WaveformSpec()
    spec = WaveformSpec(
        pips=_numbers(data, 'pips', path, d.pips, minimum=0),
        peep=_number(data, 'peep', path, d.peep, minimum=0),
        t_insp=_number(data, 't_insp', path, d.t_insp, minimum=0, strict=True),
        t_exp=_number(data, 't_exp', path, d.t_exp, minimum=0, strict=True),
    )
    try:
        spec.waveforms(dt)
    except ValueError as e:
        raise ConfigInvalid(f"waveform: {e}")
    return spec


def _parse_grid(data: Dict[str, Any]) -> GridSpec:
    path = 'grid.'
    d = GridSpec()
    return _build(path, GridSpec, kp=_numbers(data, 'kp', path, d.kp, minimum=0),
                  ki=_numbers(data, 'ki', path, d.ki, minimum=0), kd=_numbers(data, 'kd', path, d.kd, minimum=0))


def _parse_simulator(data: Dict[str, Any]) -> Tuple[SimHyper, OpenLoopSpec]:
    path = 'simulator.'
    d = SimHyper()
    hyper = _build(path, SimHyper,
                   epochs=_number(data, 'epochs', path, d.epochs, minimum=0, integer=True),
                   batch_size=_number(data, 'batch_size', path, d.batch_size, minimum=1, integer=True),
                   lr=_number(data, 'lr', path, d.lr, minimum=0),
                   weight_decay=_number(data, 'weight_decay', path, d.weight_decay, minimum=0),
                   heldout_fraction=_number(data, 'heldout_fraction', path, d.heldout_fraction, minimum=0))
    o = OpenLoopSpec()
    open_loop = OpenLoopSpec(horizon=_number(data, 'open_loop_horizon', path, o.horizon, minimum=1, integer=True),
                             samples=_number(data, 'open_loop_samples', path, o.samples, minimum=1, integer=True))
    return hyper, open_loop


def _parse_controller(data: Dict[str, Any]) -> ControllerSpec:
    path = 'controller.'
    d = ControllerSpec()
    h = AnalyticHyper()
    keep_best = data.get('keep_best', h.keep_best)
    if not isinstance(keep_best, bool):
        raise ConfigInvalid(f"{path}keep_best: 必须是布尔值")
    hyper = _build(path, AnalyticHyper,
                   epochs=_number(data, 'epochs', path, h.epochs, minimum=0, integer=True),
                   lr=_number(data, 'lr', path, h.lr, minimum=0),
                   weight_decay=_number(data, 'weight_decay', path, h.weight_decay, minimum=0),
                   clip_norm=_number(data, 'clip_norm', path, h.clip_norm, minimum=0, strict=True),
                   score_every=_number(data, 'score_every', path, h.score_every, minimum=1, integer=True),
                   keep_best=keep_best)
    return ControllerSpec(
        lam=_number(data, 'lambda', path, d.lam, minimum=0),
        lambda_sweep=_numbers(data, 'lambda_sweep', path, d.lambda_sweep, minimum=0),
        window=_number(data, 'window', path, d.window, minimum=1, integer=True),
        depth=_number(data, 'depth', path, d.depth, minimum=1, integer=True),
        width=_number(data, 'width', path, d.width, minimum=1, integer=True),
        hyper=hyper,
    )


def _parse_baseline(data: Dict[str, Any]) -> ReinforceHyper:
    path = 'baseline.'
    d = ReinforceHyper()
    return _build(path, ReinforceHyper,
                  episodes=_number(data, 'episodes', path, d.episodes, minimum=0, integer=True),
                  sigma=_number(data, 'sigma', path, d.sigma, minimum=0),
                  lr=_number(data, 'lr', path, d.lr, minimum=0),
                  weight_decay=_number(data, 'weight_decay', path, d.weight_decay, minimum=0),
                  baseline_window=_number(data, 'baseline_window', path, d.baseline_window, minimum=1, integer=True),
                  clip_norm=_number(data, 'clip_norm', path, d.clip_norm, minimum=0, strict=True),
                  score_every=_number(data, 'score_every', path, d.score_every, minimum=1, integer=True))


def _parse_exploration(data: Any, path: str) -> ExplorationConfig:
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{path.rstrip('.')}: 缺少探索配置")
    pid = data.get('base_pid')
    if not isinstance(pid, list) or len(pid) not in (3, 4):
        raise ConfigInvalid(f"{path}base_pid: 必须是 [kp, ki, kd] 或 [kp, ki, kd, window]")
    gains = _numbers({'base_pid': pid[:3]}, 'base_pid', path, (), minimum=0)
    window = None
    if len(pid) == 4 and pid[3] is not None:
        window = _number({'window': pid[3]}, 'window', f"{path}base_pid.", minimum=0, integer=True)
    return _build(path, ExplorationConfig,
                  base_pid=PidCoefficients(*gains, window=window),
                  boundary_c=_pair(data, 'boundary_c', path),
                  boundary_t=_pair(data, 'boundary_t', path),
                  triangular_c=_pair(data, 'triangular_c', path),
                  triangular_t=_pair(data, 'triangular_t', path),
                  p_a=_number(data, 'p_a', path, 0.25, minimum=0))


def _parse_arch(data: Any, path: str) -> SimArch:
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{path.rstrip('.')}: 缺少模拟器结构")
    values = {k: _number(data, k, path, minimum=0, integer=True, required=True) for k in ARCH_DIMENSIONS}
    return _build(path, SimArch, **values)


def _parse_settings(items: Any, waveforms: List[Waveform]) -> Tuple[SettingSpec, ...]:
    if not isinstance(items, list) or not items:
        raise ConfigInvalid("settings: 必须是非空数组")
    specs: List[SettingSpec] = []
    seen = set()
    for i, item in enumerate(items):
        path = f"settings[{i}]."
        if not isinstance(item, dict):
            raise ConfigInvalid(f"settings[{i}]: 必须是对象")
        R = _number(item, 'R', path, minimum=0, strict=True, required=True)
        C = _number(item, 'C', path, minimum=0, strict=True, required=True)
        setting = _build(path, LungSetting, R=R, C=C)
        if setting.key in seen:
            raise ConfigInvalid(f"settings[{i}]: 重复的设置 {setting.key}")
        seen.add(setting.key)
        # 标准设置可以省略探索参数和模拟器结构，取内置表中的值
        iso_key = (setting.R, setting.C) if setting.is_iso else None
        if item.get('exploration') is None and iso_key in ISO_EXPLORATION:
            exploration = ISO_EXPLORATION[iso_key]
        else:
            exploration = _parse_exploration(item.get('exploration'), f"{path}exploration.")
        for wf in waveforms:
            try:
                exploration.check_waveform(wf)
            except ValueError as e:
                raise ConfigInvalid(f"{path}exploration.triangular_t: {e}")
        if item.get('arch') is None and iso_key in ISO_SIM_ARCH:
            arch = ISO_SIM_ARCH[iso_key]
        else:
            arch = _parse_arch(item.get('arch'), f"{path}arch.")
        specs.append(SettingSpec(setting=setting, exploration=exploration, arch=arch))
    return tuple(specs)


def parse_experiment_config(data: Any, source: str = "<dict>") -> ExperimentConfig:
    """
    校验并构造实验配置

    Args:
        data: 已解析的 JSON 对象
        source: 来源（用于日志）

    Returns:
        实验配置

    Raises:
        ConfigInvalid: 任何字段不合法（信息中包含字段路径）
    """
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{source}: 配置顶层必须是对象")
    name = data.get('name', Path(source).stem)
    if not isinstance(name, str) or not name:
        raise ConfigInvalid("name: 必须是非空字符串")
    if 'seed' not in data:
        raise ConfigInvalid("seed: 缺少必填字段（种子必须显式给出）")
    seed = _number(data, 'seed', '', minimum=0, integer=True, required=True)
    output_dir = data.get('output_dir', f"results/{name}")
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigInvalid("output_dir: 必须是非空字符串")
    jobs = _number(data, 'jobs', '', 1, minimum=1, integer=True)

    kind, dynamics = _parse_dynamics(_section(data, 'plant', ''))
    waveform = _parse_waveform(_section(data, 'waveform', ''), dynamics.dt)
    dataset_data = _section(data, 'dataset', '')
    dataset = DatasetSpec(breaths=_number(dataset_data, 'breaths', 'dataset.', 500, minimum=1, integer=True),
                          context=_number(dataset_data, 'context', 'dataset.', 10, minimum=0, integer=True))
    simulator, open_loop = _parse_simulator(_section(data, 'simulator', ''))
    balloon_data = _section(data, 'balloon', '')
    enabled = balloon_data.get('enabled', True)
    if not isinstance(enabled, bool):
        raise ConfigInvalid("balloon.enabled: 必须是布尔值")
    balloon = BalloonSpec(enabled=enabled,
                          breaths=_number(balloon_data, 'breaths', 'balloon.', 100, minimum=1, integer=True))

    cfg = ExperimentConfig(
        name=name,
        seed=seed,
        output_dir=output_dir,
        jobs=jobs,
        plant_kind=kind,
        dynamics=dynamics,
        waveform=waveform,
        grid=_parse_grid(_section(data, 'grid', '')),
        dataset=dataset,
        simulator=simulator,
        open_loop=open_loop,
        controller=_parse_controller(_section(data, 'controller', '')),
        baseline=_parse_baseline(_section(data, 'baseline', '')),
        balloon=balloon,
        settings=_parse_settings(data.get('settings'), waveform.waveforms(dynamics.dt)),
    )
    logger.debug(f"配置 {source} 校验通过: {len(cfg.settings)} 个设置")
    return cfg


def load_experiment_config(config_file: str) -> ExperimentConfig:
    """
    从 JSON 文件加载实验配置

    Raises:
        ConfigInvalid: 文件不存在、不是合法 JSON 或字段不合法
    """
    path = Path(config_file)
    if not path.is_file():
        raise ConfigInvalid(f"配置文件不存在: {config_file}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigInvalid(f"配置文件不是合法的 JSON: {config_file}: {e}")
    cfg = parse_experiment_config(data, source=str(path))
    logger.info(f"已加载配置 {config_file}（{cfg.name}，{len(cfg.settings)} 个设置）")
    return cfg


def parse_settings_filter(text: str) -> List[Tuple[float, float]]:
    """解析 "5,50;20,10" 形式的设置过滤器"""
    pairs: List[Tuple[float, float]] = []
    for part in text.split(';'):
        part = part.strip()
        if not part:
            continue
        fields = part.split(',')
        if len(fields) != 2:
            raise ConfigInvalid(f"--settings: 无法解析 {part!r}（格式为 R,C;R,C）")
        try:
            pairs.append((float(fields[0]), float(fields[1])))
        except ValueError:
            raise ConfigInvalid(f"--settings: 无法解析 {part!r}（格式为 R,C;R,C）")
    if not pairs:
        raise ConfigInvalid("--settings: 至少需要一个设置")
    return pairs


def apply_overrides(cfg: ExperimentConfig, seed: Optional[int] = None, out: Optional[str] = None,
                    settings: Optional[str] = None, jobs: Optional[int] = None) -> ExperimentConfig:
    """
    合并覆盖项：命令行 > 环境变量（VENTBENCH_OUT, VENTBENCH_JOBS）> 配置文件

    Raises:
        ConfigInvalid: 覆盖值不合法，或过滤器引用了配置中没有的设置
    """
    changes: Dict[str, Any] = {}
    if seed is not None:
        if seed < 0:
            raise ConfigInvalid(f"--seed: 必须非负: {seed}")
        changes['seed'] = seed

    env_out = os.getenv(ENV_OUT)
    if out:
        changes['output_dir'] = out
    elif env_out:
        logger.info(f"使用环境变量 {ENV_OUT} 指定的输出目录: {env_out}")
        changes['output_dir'] = env_out

    env_jobs = os.getenv(ENV_JOBS)
    if jobs is None and env_jobs:
        try:
            jobs = int(env_jobs)
        except ValueError:
            raise ConfigInvalid(f"{ENV_JOBS}: 必须是整数: {env_jobs!r}")
    if jobs is not None:
        if jobs < 1:
            raise ConfigInvalid(f"--jobs: 必须 >= 1: {jobs}")
        changes['jobs'] = jobs

    if settings:
        wanted = parse_settings_filter(settings)
        by_rc = {(s.setting.R, s.setting.C): s for s in cfg.settings}
        missing = [f"{R:g},{C:g}" for R, C in wanted if (R, C) not in by_rc]
        if missing:
            raise ConfigInvalid(f"--settings: 配置中没有这些设置: {'; '.join(missing)}")
        changes['settings'] = tuple(by_rc[rc] for rc in wanted)
    return replace(cfg, **changes) if changes else cfg
