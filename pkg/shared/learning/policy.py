"""
残差控制器 - PID 基线加神经网络修正

u = clamp(pid_control(...) + λ·net(features), 0, u_max)

训练方式：
- 解析策略梯度：在可微模拟器上展开闭环，L1 损失对修正网络参数精确求导（按轮次轮转所有模拟器×波形）
- REINFORCE 基线：高斯探索 + 减基线的回报，作为无模型方法的对照
"""
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from shared.learning.nnet import (Grads, Mlp, Tape, add_grads, backward, clip_grad_norm, cosine_lr, forward,
                                  mlp_from_dict, mlp_to_dict, sgd_step)
from shared.learning.simlearn import SimulatorModel, SimulatorRollout, history_window, resting_context
from shared.lung.dynamics import INSPIRATORY, Plant, Waveform, run_breath
from shared.lung.pid import DEFAULT_U_MAX, PidCoefficients, PidState, pid_output
from shared.utils.errors import DivergentLoss, SafetyAbort
from shared.utils.seeding import derive_rng

logger = logging.getLogger(__name__)

# 常量定义
PRESSURE_SCALE = 35.0
DIVERGENCE_FACTOR = 10.0
SCORE_BREATHS = 3
POLICY_FORMAT = "ventbench-policy"
POLICY_FORMAT_VERSION = 1
ANALYTIC = "analytic"
REINFORCE = "reinforce"


@dataclass
class ControllerPolicy:
    """
    残差控制策略

    Attributes:
        pid: 基线 PID 系数（训练时冻结）
        net: 修正网络，输入 2·window，输出 1
        lam: 修正项权重 λ（λ=0 时退化为 PID）
        window: 特征窗口长度
        scale: 特征的压力缩放
        u_max: 控制上限
    """
    pid: PidCoefficients
    net: Mlp
    lam: float = 0.1
    window: int = 5
    scale: float = PRESSURE_SCALE
    u_max: float = DEFAULT_U_MAX

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"λ 必须非负: {self.lam}")
        if self.window < 1:
            raise ValueError(f"特征窗口必须 >= 1: {self.window}")
        if self.net.input_width != 2 * self.window or self.net.output_width != 1:
            raise ValueError(f"修正网络形状 {self.net.widths} 与特征窗口 {self.window} 不符")

    def copy(self) -> 'ControllerPolicy':
        return ControllerPolicy(pid=self.pid, net=self.net.copy(), lam=self.lam, window=self.window,
                                scale=self.scale, u_max=self.u_max)


def make_policy(pid: PidCoefficients, lam: float = 0.1, window: int = 5, depth: int = 2, width: int = 32,
                seed: int = 0, u_max: float = DEFAULT_U_MAX) -> ControllerPolicy:
    """新建残差策略；修正网络输出层初始化为 0，因此初始策略与 PID 完全一致"""
    net = Mlp([2 * window] + [width] * depth + [1], seed=seed, zero_output=True)
    return ControllerPolicy(pid=pid, net=net, lam=lam, window=window, u_max=u_max)


def controller_features(errors: Sequence[float], targets: Sequence[float], window: int,
                        scale: float = PRESSURE_SCALE) -> np.ndarray:
    """
    最近 window 个误差和 window 个目标（各自旧→新，左侧补零）拼接后除以压力缩放

    Args:
        errors: 误差历史 ε = target - measured
        targets: 目标压力历史
        window: 窗口长度
        scale: 压力缩放

    Returns:
        长度 2·window 的特征向量
    """
    e = history_window(errors, len(errors) - 1, window)
    g = history_window(targets, len(targets) - 1, window)
    return np.concatenate([e, g]) / scale


class ResidualState:
    """残差控制器的运行状态：PID 误差窗口 + 特征用的误差/目标历史"""

    def __init__(self, pid_window: Optional[int] = None):
        self.pid = PidState(pid_window)
        self.errors: List[float] = []
        self.targets: List[float] = []

    def reset(self) -> None:
        self.pid.reset()
        self.errors = []
        self.targets = []


@dataclass
class _StepRecord:
    raw_pid: float
    raw: float
    y: float
    tape: Optional[Tape]
    noise: float = 0.0


def _clamp(u: float, u_max: float) -> float:
    return min(max(u, 0.0), u_max)


def _clamp_grad(g: float, raw: float, u_max: float) -> float:
    """截断的梯度：区间内原样通过；恰好落在边界上时只保留把 raw 推回区间内的方向，区间外为 0"""
    if 0.0 < raw < u_max:
        return g
    if raw == u_max:
        return g if g > 0 else 0.0
    if raw == 0.0:
        return g if g < 0 else 0.0
    return 0.0


def _residual_step(policy: ControllerPolicy, state: ResidualState, target: float, measured: float,
                   noise: float = 0.0) -> Tuple[float, _StepRecord]:
    err = target - measured
    prev = state.pid.last_error
    state.pid.errors.append(err)
    raw_pid = pid_output(state.pid.errors, prev, policy.pid)
    u_pid = _clamp(raw_pid, policy.u_max)
    state.errors.append(err)
    state.targets.append(target)
    y, tape = 0.0, None
    if policy.lam > 0:
        out, tape = forward(policy.net, controller_features(state.errors, state.targets, policy.window, policy.scale))
        y = float(out[0])
    raw = u_pid + policy.lam * y + noise
    return _clamp(raw, policy.u_max), _StepRecord(raw_pid=raw_pid, raw=raw, y=y, tape=tape, noise=noise)


def residual_control(policy: ControllerPolicy, target: float, measured: float, state: ResidualState) -> float:
    """
    残差控制律（会把当前误差压入 state）

    Returns:
        控制量 u ∈ [0, u_max]
    """
    u, _ = _residual_step(policy, state, target, measured)
    return u


class ResidualController:
    """满足 Controller 协议的残差控制器（每次吸气开始时重置历史）"""

    def __init__(self, policy: ControllerPolicy):
        self.policy = policy
        self.state = ResidualState(policy.pid.window)

    def reset(self) -> None:
        self.state.reset()

    def control(self, target: float, measured: float, t: float) -> float:
        return residual_control(self.policy, target, measured, self.state)


# ========== 闭环展开 ==========

def _closed_loop(policy: ControllerPolicy, sim: SimulatorModel, wf: Waveform, record: bool,
                 sigma: float = 0.0, rng: Optional[np.random.Generator] = None
                 ) -> Tuple[SimulatorRollout, List[_StepRecord]]:
    """在模拟器上从静息状态展开一个吸气回合：控制 u_0..u_{T-2}，压力 p_0..p_{T-1}，p_0 = PEEP"""
    T = wf.inspiratory_steps
    roll = SimulatorRollout(sim, wf.peep, record=record, context=resting_context(sim, wf.peep))
    state = ResidualState(policy.pid.window)
    records: List[_StepRecord] = []
    for t in range(T - 1):
        noise = float(sigma * rng.standard_normal()) if sigma > 0 else 0.0
        u, rec = _residual_step(policy, state, wf.pip, roll.pressures[t], noise)
        roll.step(u)
        records.append(rec)
    return roll, records


def _episode_loss(roll: SimulatorRollout, wf: Waveform) -> float:
    """回合损失：p_1..p_{T-1} 的 L1 偏差之和"""
    return float(np.sum(np.abs(np.asarray(roll.pressures[1:]) - wf.pip)))


def closed_loop_gradient(policy: ControllerPolicy, sim: SimulatorModel, wf: Waveform) -> Tuple[float, Grads]:
    """
    一个闭环回合的损失及其对修正网络参数的精确梯度（PID 和模拟器冻结）

    沿展开链反向：先把 p_{t+1} 的梯度传过模拟器第 t 步，再传过第 t 步的控制器
    （截断处只保留把控制量推回区间内的梯度，PID 分支经由误差 ε_j = target - p_j 回到压力）。
    L1 在 0 处取次梯度 0。
    """
    roll, records = _closed_loop(policy, sim, wf, record=True)
    loss = _episode_loss(roll, wf)
    n = len(records)
    grads = policy.net.zero_grads()
    if n == 0 or policy.lam == 0:
        return loss, grads

    c = policy.pid
    w = policy.window
    gp = np.zeros(n + 1)
    gp[1:] = np.sign(np.asarray(roll.pressures[1:]) - wf.pip)
    gu = np.zeros(n)
    g_err = np.zeros(n + 1)
    for t in reversed(range(n)):
        # ε_{t+1} 只被第 t+1 步及之后的控制器使用，此时已累加完毕
        gp[t + 1] -= g_err[t + 1]
        roll.backward_step(t, gp, gu)

        rec = records[t]
        g_raw = _clamp_grad(gu[t], rec.raw, policy.u_max)
        if g_raw == 0.0:
            continue
        dx, g_net = backward(policy.net, rec.tape, np.array([policy.lam * g_raw]))
        add_grads(grads, g_net)
        for j in range(w):
            idx = t - w + 1 + j
            if idx >= 0:
                g_err[idx] += dx[j] / policy.scale
        if 0.0 < rec.raw_pid < policy.u_max:
            g_err[t] += (c.kp + c.kd) * g_raw
            if t >= 1:
                g_err[t - 1] -= c.kd * g_raw
            if c.ki:
                start = 0 if c.window is None else max(0, t - c.window)
                g_err[start:t + 1] += c.ki * g_raw
    return loss, grads


def simulated_loss(policy: ControllerPolicy, sim: SimulatorModel, wf: Waveform) -> float:
    """模拟器上一个闭环回合的逐步平均 L1 偏差"""
    roll, _ = _closed_loop(policy, sim, wf, record=False)
    return _episode_loss(roll, wf) / max(len(roll), 1)


def simulated_score(policy: ControllerPolicy, simulators: Union[SimulatorModel, Sequence[SimulatorModel]],
                    waveforms: Sequence[Waveform]) -> float:
    """学习到的模拟器上的闭环平均 L1（训练曲线用，不用于真实被控对象上的报告）"""
    sims = [simulators] if isinstance(simulators, SimulatorModel) else list(simulators)
    losses = [simulated_loss(policy, sim, wf) for sim in sims for wf in waveforms]
    return math.fsum(losses) / len(losses)


# ========== 训练 ==========

@dataclass(frozen=True)
class AnalyticHyper:
    """解析策略梯度训练参数"""
    epochs: int = 30
    lr: float = 0.1
    weight_decay: float = 1e-5
    clip_norm: Optional[float] = 10.0
    score_every: int = 6
    keep_best: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.lr < 0 or self.weight_decay < 0 or self.score_every < 1:
            raise ValueError(f"无效的训练参数: {self}")


@dataclass(frozen=True)
class ReinforceHyper:
    """REINFORCE 基线训练参数"""
    episodes: int = 2000
    sigma: float = 5.0
    lr: float = 0.01
    weight_decay: float = 0.0
    baseline_window: int = 20
    clip_norm: Optional[float] = 5.0
    score_every: int = 6

    def __post_init__(self):
        if self.episodes < 0 or self.sigma < 0 or self.lr < 0 or self.baseline_window < 1 or self.score_every < 1:
            raise ValueError(f"无效的训练参数: {self}")


@dataclass
class TrainRun:
    """
    训练记录

    Attributes:
        method: 训练方法
        losses: 每个回合的模拟器损失
        epoch_losses: 每轮平均损失（解析方法）
        best_epoch: 保留的策略来自哪一轮之后（-1 表示初始策略；未启用 keep_best 时为 None）
        scores: (回合数, 分数) 评分曲线
        episodes: 已用回合数（单调递增）
        wall_clock: 训练耗时，s（不写入结果文件）
    """
    method: str
    losses: List[float] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)
    best_epoch: Optional[int] = None
    scores: List[Tuple[int, float]] = field(default_factory=list)
    episodes: int = 0
    wall_clock: float = 0.0


Scorer = Callable[[ControllerPolicy], float]


def _record_score(run: TrainRun, policy: ControllerPolicy, scorer: Optional[Scorer], every: int,
                  force: bool = False) -> None:
    if scorer is None:
        return
    if run.scores and run.scores[-1][0] == run.episodes:
        return
    if force or run.episodes % every == 0:
        run.scores.append((run.episodes, scorer(policy)))


def _check_divergence(initial: Dict[Any, float], key: Any, loss: float, episode: int) -> None:
    if not math.isfinite(loss):
        raise DivergentLoss(episode, loss, initial.get(key, loss))
    first = initial.setdefault(key, loss)
    if first > 0 and loss > DIVERGENCE_FACTOR * first:
        raise DivergentLoss(episode, loss, first)


def train_analytic(policy: ControllerPolicy, simulators: Sequence[SimulatorModel], waveforms: Sequence[Waveform],
                   hyper: Optional[AnalyticHyper] = None,
                   scorer: Optional[Scorer] = None) -> Tuple[ControllerPolicy, TrainRun]:
    """
    解析策略梯度训练

    每轮按 (模拟器, 波形) 的笛卡尔积轮转一遍，每个组合展开一个吸气回合、反向传播并更新一次修正网络。
    keep_best 时每轮结束在模拟器上评估，返回模拟器分数最低的那一轮（含初始策略）。

    Args:
        policy: 初始策略（不会被修改）
        simulators: 冻结的模拟器列表
        waveforms: 目标波形列表
        hyper: 训练参数
        scorer: 可选的评分函数，每 score_every 个回合调用一次

    Returns:
        (训练后的策略, 训练记录)

    Raises:
        DivergentLoss: 某个组合的损失超过其初始值的 10 倍
    """
    hyper = hyper or AnalyticHyper()
    if not simulators or not waveforms:
        raise ValueError("simulators 和 waveforms 不能为空")
    policy = policy.copy()
    run = TrainRun(method=ANALYTIC)
    if hyper.epochs == 0:
        return policy, run
    initial: Dict[Tuple[int, int], float] = {}
    started = time.perf_counter()
    _record_score(run, policy, scorer, hyper.score_every)
    best, best_score = None, math.inf
    if hyper.keep_best:
        best, best_score, run.best_epoch = policy.copy(), simulated_score(policy, simulators, waveforms), -1
    for epoch in range(hyper.epochs):
        lr = cosine_lr(hyper.lr, epoch, hyper.epochs)
        epoch_losses: List[float] = []
        for si, sim in enumerate(simulators):
            for wi, wf in enumerate(waveforms):
                loss, grads = closed_loop_gradient(policy, sim, wf)
                _check_divergence(initial, (si, wi), loss, run.episodes)
                if hyper.clip_norm:
                    grads, _ = clip_grad_norm(grads, hyper.clip_norm)
                sgd_step(policy.net, grads, lr, hyper.weight_decay)
                run.losses.append(loss)
                epoch_losses.append(loss)
                run.episodes += 1
                _record_score(run, policy, scorer, hyper.score_every)
        run.epoch_losses.append(math.fsum(epoch_losses) / len(epoch_losses))
        logger.debug(f"解析训练 epoch {epoch}: loss={run.epoch_losses[-1]:.4f} lr={lr:.4f}")
        if hyper.keep_best:
            current = simulated_score(policy, simulators, waveforms)
            if current < best_score:
                best, best_score, run.best_epoch = policy.copy(), current, epoch
    if best is not None and run.best_epoch != hyper.epochs - 1:
        logger.info(f"解析训练保留第 {run.best_epoch} 轮之后的策略（模拟器分数 {best_score:.4f}）")
        policy = best
        if run.scores and run.scores[-1][0] == run.episodes:
            run.scores.pop()
    _record_score(run, policy, scorer, hyper.score_every, force=True)
    run.wall_clock = time.perf_counter() - started
    if run.epoch_losses:
        logger.info(f"解析训练完成: {run.episodes} 个回合，损失 {run.epoch_losses[0]:.4f} -> {run.epoch_losses[-1]:.4f}，"
                    f"耗时 {run.wall_clock:.1f}s")
    return policy, run


def train_reinforce_baseline(policy: ControllerPolicy, simulator: SimulatorModel, waveforms: Sequence[Waveform],
                             hyper: Optional[ReinforceHyper] = None, seed: int = 0,
                             scorer: Optional[Scorer] = None) -> Tuple[ControllerPolicy, TrainRun]:
    """
    REINFORCE 基线：策略输出截断前控制量的高斯均值（固定 σ），回报为负的 L1 偏差之和

    优势 = (回报 - 最近回报均值) / 最近回报标准差；σ = 0 时为确定性展开，梯度为 0。

    Raises:
        DivergentLoss: 损失超过初始值的 10 倍
    """
    hyper = hyper or ReinforceHyper()
    if not waveforms:
        raise ValueError("waveforms 不能为空")
    policy = policy.copy()
    rng = derive_rng(seed, 'reinforce')
    run = TrainRun(method=REINFORCE)
    if hyper.episodes == 0:
        return policy, run
    initial: Dict[int, float] = {}
    returns: List[float] = []
    started = time.perf_counter()
    _record_score(run, policy, scorer, hyper.score_every)
    for episode in range(hyper.episodes):
        wi = episode % len(waveforms)
        wf = waveforms[wi]
        roll, records = _closed_loop(policy, simulator, wf, record=False, sigma=hyper.sigma, rng=rng)
        loss = _episode_loss(roll, wf)
        _check_divergence(initial, wi, loss, run.episodes)
        reward = -loss
        recent = returns[-hyper.baseline_window:]
        returns.append(reward)
        if hyper.sigma > 0 and policy.lam > 0 and len(recent) >= 2:
            advantage = (reward - float(np.mean(recent))) / (float(np.std(recent)) + 1e-8)
            grads = policy.net.zero_grads()
            for rec in records:
                # ∂logπ/∂y = λ·(a - μ)/σ²；最小化 -A·logπ
                dy = -advantage * policy.lam * rec.noise / hyper.sigma ** 2
                _, g = backward(policy.net, rec.tape, np.array([dy]))
                add_grads(grads, g)
            if hyper.clip_norm:
                grads, _ = clip_grad_norm(grads, hyper.clip_norm)
            sgd_step(policy.net, grads, cosine_lr(hyper.lr, episode, hyper.episodes), hyper.weight_decay)
        run.losses.append(loss)
        run.episodes += 1
        _record_score(run, policy, scorer, hyper.score_every)
    _record_score(run, policy, scorer, hyper.score_every, force=True)
    run.wall_clock = time.perf_counter() - started
    logger.info(f"REINFORCE 训练完成: {run.episodes} 个回合，耗时 {run.wall_clock:.1f}s")
    return policy, run


# ========== 评分 ==========

def score_controller(controller, plant_factory: Callable[[], Plant], waveforms: Sequence[Waveform],
                     n_breaths: int = SCORE_BREATHS) -> float:
    """
    在真实被控对象上评分：每个波形新建对象跑 n_breaths 次呼吸，丢弃第一次，
    取吸气段逐步 L1 偏差的平均，再对波形取平均

    Args:
        controller: 满足 Controller 协议的控制器
        plant_factory: 返回新被控对象的工厂（不能是学习到的模拟器）
        waveforms: 目标波形
        n_breaths: 每个波形的呼吸次数（>= 2）

    Returns:
        分数（越小越好）；触发安全中止时为 inf
    """
    if not waveforms:
        raise ValueError("waveforms 不能为空")
    if n_breaths < 2:
        raise ValueError(f"n_breaths 必须 >= 2: {n_breaths}")
    per_waveform: List[float] = []
    for wf in waveforms:
        plant = plant_factory()
        try:
            traj = run_breath(plant, controller, wf, n_breaths)
        except SafetyAbort as e:
            logger.debug(f"{plant.setting.key} {wf.key} 评分时安全中止: {e}")
            return math.inf
        kept = traj.samples[wf.steps_per_breath:]
        errors = [abs(s.p - wf.pip) for s in kept if s.phase == INSPIRATORY]
        per_waveform.append(math.fsum(errors) / len(errors))
    return math.fsum(per_waveform) / len(per_waveform)


# ========== 持久化 ==========

def policy_to_dict(policy: ControllerPolicy) -> Dict[str, Any]:
    return {
        'format': POLICY_FORMAT,
        'version': POLICY_FORMAT_VERSION,
        'pid': policy.pid.to_dict(),
        'lam': policy.lam,
        'window': policy.window,
        'scale': policy.scale,
        'u_max': policy.u_max,
        'net': mlp_to_dict(policy.net),
    }


def policy_from_dict(data: Dict[str, Any]) -> ControllerPolicy:
    if data.get('format') != POLICY_FORMAT:
        raise ValueError(f"不是策略数据: {data.get('format')}")
    if data.get('version') != POLICY_FORMAT_VERSION:
        raise ValueError(f"不支持的策略版本: {data.get('version')}")
    return ControllerPolicy(pid=PidCoefficients.from_dict(data['pid']), net=mlp_from_dict(data['net']),
                            lam=float(data['lam']), window=int(data['window']), scale=float(data['scale']),
                            u_max=float(data['u_max']))


def save_policy(path: Union[str, Path], policy: ControllerPolicy) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(policy_to_dict(policy), f)


def load_policy(path: Union[str, Path]) -> ControllerPolicy:
    with open(path, 'r', encoding='utf-8') as f:
        return policy_from_dict(json.load(f))
