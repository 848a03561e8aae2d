"""
SVG 图表 - 轨迹、训练曲线和开环距离（matplotlib Agg 后端，输出可逐字节复现）
"""
import logging
from pathlib import Path
from typing import Dict, Sequence, Tuple, Union

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)

# 固定 SVG 内部 id 的盐，去掉日期元数据
matplotlib.rcParams['svg.hashsalt'] = 'ventbench'
SVG_METADATA = {'Date': None}


def _save(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format='svg', metadata=SVG_METADATA)
    plt.close(fig)
    logger.debug(f"已保存图表 {path}")
    return path


def plot_trajectories(path: Union[str, Path], times: Sequence[float], series: Dict[str, Sequence[float]],
                      target: Sequence[float], title: str) -> Path:
    """
    压力轨迹对比图

    Args:
        path: 输出 SVG 路径
        times: 时间轴，s
        series: 图例名 -> 压力序列
        target: 目标压力
        title: 标题
    """
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(times, target, color='k', linestyle='--', linewidth=1, label='target')
    for name, pressures in series.items():
        ax.plot(times, pressures, linewidth=1.2, label=name)
    ax.set_xlabel("Time [s]")
    ax.set_ylabel("Pressure [cmH2O]")
    ax.set_title(title)
    ax.grid(True)
    ax.legend()
    return _save(fig, path)


def plot_curves(path: Union[str, Path], curves: Dict[str, Sequence[Tuple[int, float]]], title: str) -> Path:
    """训练曲线（横轴回合数，纵轴分数，对数坐标）"""
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, points in curves.items():
        if not points:
            continue
        episodes, scores = zip(*points)
        ax.plot(episodes, scores, linewidth=1.2, marker='o', markersize=2, label=name)
    ax.set_xscale('symlog')
    ax.set_xlabel("Episodes")
    ax.set_ylabel("Score (mean L1) [cmH2O]")
    ax.set_title(title)
    ax.grid(True)
    ax.legend()
    return _save(fig, path)


def plot_open_loop(path: Union[str, Path], per_step: Sequence[float], title: str) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(range(1, len(per_step) + 1), per_step, linewidth=1.2, color='red')
    ax.set_xlabel("Step")
    ax.set_ylabel("Mean open-loop distance [cmH2O]")
    ax.set_title(title)
    ax.grid(True)
    return _save(fig, path)
