"""
随机数派生 - 所有随机性都来自同一个种子
"""
import zlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _stable_key(key: Key) -> int:
    # 字符串键用 crc32 转成稳定整数，不受 PYTHONHASHSEED 影响
    if isinstance(key, str):
        return zlib.crc32(key.encode('utf-8'))
    return int(key)


def derive_rng(seed: int, *keys: Key) -> np.random.Generator:
    """
    根据主种子和一组稳定键派生独立的随机数生成器

    Args:
        seed: 主种子
        keys: 组件标识（如 "explore", 设置编号）

    Returns:
        numpy Generator
    """
    entropy = [int(seed)] + [_stable_key(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, *keys: Key) -> int:
    """派生一个整数子种子（用于需要整数种子的构造函数）"""
    return int(derive_rng(seed, *keys).integers(0, 2**31 - 1))
