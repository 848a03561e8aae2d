"""
最小前馈网络 - 全连接 MLP、反向模式求导与 SGD

隐藏层 tanh，输出层线性；参数均为 float64。
每次参数更新都会递增 version，旧的 Tape 因此失效。
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from shared.utils.errors import ShapeMismatch, StaleTape

logger = logging.getLogger(__name__)

# 常量定义
TANH = "tanh"
LINEAR = "linear"
ACTIVATIONS = (TANH, LINEAR)
MLP_FORMAT = "ventbench-mlp"
MLP_FORMAT_VERSION = 1

Grads = List[np.ndarray]


class Mlp:
    """
    全连接网络

    Attributes:
        widths: 各层宽度 (输入, 隐藏层..., 输出)
        weights: 权重矩阵列表，第 i 个形状为 (widths[i+1], widths[i])
        biases: 偏置向量列表
        activations: 每层激活函数名
        version: 参数版本号
    """

    def __init__(self, widths: Sequence[int], seed: int = 0, activation: str = TANH,
                 zero_output: bool = False):
        """
        Args:
            widths: 各层宽度，至少两项
            seed: 初始化种子（均匀分布 ±√3/√fan_in）
            activation: 隐藏层激活函数
            zero_output: 输出层权重和偏置初始化为 0
        """
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"无效的层宽度: {widths}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"未知的激活函数: {activation}")
        self.widths = widths
        self.activations = [activation] * (len(widths) - 2) + [LINEAR]
        rng = np.random.default_rng(seed)
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = math.sqrt(3.0 / fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))
        if zero_output:
            self.weights[-1][:] = 0.0
            self.biases[-1][:] = 0.0
        self.version = 0

    @property
    def input_width(self) -> int:
        return self.widths[0]

    @property
    def output_width(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def parameters(self) -> List[np.ndarray]:
        """参数列表，顺序为 [W0, b0, W1, b1, ...]（返回的是引用）"""
        params: List[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        return params

    def zero_grads(self) -> Grads:
        return [np.zeros_like(p) for p in self.parameters()]

    def copy(self) -> 'Mlp':
        clone = Mlp.__new__(Mlp)
        clone.widths = list(self.widths)
        clone.activations = list(self.activations)
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        clone.version = 0
        return clone

    def touch(self) -> None:
        """参数被原地修改后调用，使已有 Tape 失效"""
        self.version += 1

    def __repr__(self) -> str:
        return f"Mlp(widths={self.widths})"


@dataclass
class Tape:
    """前向记录：每层的输入与输出"""
    net_id: int
    version: int
    inputs: List[np.ndarray]
    outputs: List[np.ndarray]
    batched: bool


def forward(net: Mlp, x) -> Tuple[np.ndarray, Tape]:
    """
    前向传播

    Args:
        net: 网络
        x: 输入向量 (n,) 或批量 (batch, n)

    Returns:
        (输出, Tape)；输出形状与输入的批量维度一致

    Raises:
        ShapeMismatch: 输入宽度与网络不符
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.input_width:
        raise ShapeMismatch(f"输入形状 {x.shape} 与网络输入宽度 {net.input_width} 不符")
    batched = x.ndim == 2
    a = x if batched else x[np.newaxis, :]
    inputs: List[np.ndarray] = []
    outputs: List[np.ndarray] = []
    for w, b, act in zip(net.weights, net.biases, net.activations):
        inputs.append(a)
        z = a @ w.T + b
        a = np.tanh(z) if act == TANH else z
        outputs.append(a)
    y = a if batched else a[0]
    return y, Tape(net_id=id(net), version=net.version, inputs=inputs, outputs=outputs, batched=batched)


def backward(net: Mlp, tape: Tape, dy, params: bool = True) -> Tuple[np.ndarray, Optional[Grads]]:
    """
    反向传播：计算 y·dy 对输入和全部参数的梯度

    Args:
        net: 网络（必须与生成 tape 时一致且未被修改）
        tape: forward 返回的记录
        dy: 输出的上游梯度，形状与输出一致
        params: 是否计算参数梯度（只需要输入梯度时可关闭）

    Returns:
        (dx, 参数梯度列表或 None)，参数梯度顺序与 net.parameters() 一致

    Raises:
        StaleTape: tape 来自其他网络或参数已更新
        ShapeMismatch: dy 形状不符
    """
    if tape.net_id != id(net) or tape.version != net.version:
        raise StaleTape(f"Tape 已过期（版本 {tape.version}，当前 {net.version}）")
    g = np.asarray(dy, dtype=np.float64)
    expected = tape.outputs[-1].shape if tape.batched else tape.outputs[-1].shape[1:]
    if g.shape != expected:
        raise ShapeMismatch(f"dy 形状 {g.shape} 与输出形状 {expected} 不符")
    if not tape.batched:
        g = g[np.newaxis, :]

    grads: Optional[Grads] = [None] * (2 * net.n_layers) if params else None
    for i in reversed(range(net.n_layers)):
        if net.activations[i] == TANH:
            g = g * (1.0 - tape.outputs[i] ** 2)
        if grads is not None:
            grads[2 * i] = g.T @ tape.inputs[i]
            grads[2 * i + 1] = g.sum(axis=0)
        g = g @ net.weights[i]
    dx = g if tape.batched else g[0]
    return dx, grads


def add_grads(acc: Grads, grads: Grads) -> Grads:
    """原地累加梯度"""
    for a, g in zip(acc, grads):
        a += g
    return acc


def grad_norm(grads: Grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_grad_norm(grads: Grads, max_norm: float) -> Tuple[Grads, float]:
    """按全局范数裁剪梯度，返回 (裁剪后的梯度, 裁剪前的范数)"""
    norm = grad_norm(grads)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        return [g * factor for g in grads], norm
    return grads, norm


def sgd_step(net: Mlp, grads: Grads, lr: float, weight_decay: float = 0.0) -> None:
    """
    SGD 更新：θ ← θ − lr·(grad + weight_decay·θ)

    Raises:
        ShapeMismatch: 梯度与参数形状不符
    """
    params = net.parameters()
    if len(grads) != len(params):
        raise ShapeMismatch(f"梯度个数 {len(grads)} 与参数个数 {len(params)} 不符")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ShapeMismatch(f"梯度形状 {g.shape} 与参数形状 {p.shape} 不符")
    for p, g in zip(params, grads):
        p -= lr * (g + weight_decay * p)
    net.touch()


def cosine_lr(base: float, epoch: int, n_epochs: int, floor: float = 0.0) -> float:
    """余弦退火学习率：epoch=0 时为 base，最后趋近 floor"""
    if n_epochs <= 0:
        return base
    progress = min(max(epoch / n_epochs, 0.0), 1.0)
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * progress))


def mlp_to_dict(net: Mlp) -> Dict[str, Any]:
    return {
        'format': MLP_FORMAT,
        'version': MLP_FORMAT_VERSION,
        'widths': list(net.widths),
        'activations': list(net.activations),
        'weights': [w.ravel().tolist() for w in net.weights],
        'biases': [b.tolist() for b in net.biases],
    }


def mlp_from_dict(data: Dict[str, Any]) -> Mlp:
    if data.get('format') != MLP_FORMAT:
        raise ValueError(f"不是网络模型数据: {data.get('format')}")
    if data.get('version') != MLP_FORMAT_VERSION:
        raise ValueError(f"不支持的网络模型版本: {data.get('version')}")
    widths = [int(w) for w in data['widths']]
    net = Mlp.__new__(Mlp)
    net.widths = widths
    net.activations = list(data['activations'])
    net.weights = []
    net.biases = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        w = np.array(data['weights'][i], dtype=np.float64)
        b = np.array(data['biases'][i], dtype=np.float64)
        if w.size != fan_in * fan_out or b.size != fan_out:
            raise ShapeMismatch(f"第 {i} 层参数个数与宽度 {widths} 不符")
        net.weights.append(w.reshape(fan_out, fan_in))
        net.biases.append(b)
    net.version = 0
    return net


def save_mlp(path: Union[str, Path], net: Mlp) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(mlp_to_dict(net), f)


def load_mlp(path: Union[str, Path]) -> Mlp:
    with open(path, 'r', encoding='utf-8') as f:
        return mlp_from_dict(json.load(f))
