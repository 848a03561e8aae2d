"""
错误类型 - ventbench 全部异常的统一定义

每个异常携带固定的错误码和错误信息，CLI 根据错误码决定退出码。
"""
from typing import Optional


class VentBenchError(Exception):
    """ventbench 基础异常"""

    error_code: int = 1000

    def __init__(self, error_msg: str, error_code: Optional[int] = None):
        if error_code is not None:
            self.error_code = error_code
        self.error_msg = error_msg
        super().__init__(f"{self.error_code} - {error_msg}")

    def __reduce__(self):
        # 进程池回传异常时按原参数重建
        return self.__class__, (self.error_msg, self.error_code)


# ========== 动力学 ==========

class NonPositiveVolume(VentBenchError):
    """肺容积被抽空（呼气过度）"""
    error_code = 1001


class SafetyAbort(VentBenchError):
    """压力或容积超过安全上限，中止本次运行（对应硬件的软件保护）"""
    error_code = 1002

    def __init__(self, t: float, p: float, reason: str = "pressure"):
        self.t = t
        self.p = p
        self.reason = reason
        super().__init__(f"安全中止: t={t:.3f}s, p={p:.2f} cmH2O ({reason})")

    def __reduce__(self):
        return self.__class__, (self.t, self.p, self.reason)


class EmptyTrajectory(VentBenchError):
    error_code = 1003


# ========== 神经网络 ==========

class ShapeMismatch(VentBenchError):
    error_code = 2001


class StaleTape(VentBenchError):
    """反向传播使用了过期的前向记录"""
    error_code = 2002


# ========== 模拟器学习 ==========

class EpisodeTooShort(VentBenchError):
    error_code = 3001


class DegenerateData(VentBenchError):
    error_code = 3002


# ========== 控制器训练 ==========

class DivergentLoss(VentBenchError):
    """训练损失发散（通常是学习率过大）"""
    error_code = 4001

    def __init__(self, episode: int, loss: float, initial: float):
        self.episode = episode
        self.loss = loss
        self.initial = initial
        super().__init__(f"训练发散: 第 {episode} 个回合损失 {loss:.3f} 超过初始值 {initial:.3f} 的 10 倍")

    def __reduce__(self):
        return self.__class__, (self.episode, self.loss, self.initial)


# ========== 配置与流程 ==========

class ConfigInvalid(VentBenchError):
    error_code = 5001


class StageFailed(VentBenchError):
    error_code = 5002

    def __init__(self, stage: str, error_msg: str):
        self.stage = stage
        self.stage_msg = error_msg
        super().__init__(f"阶段 {stage} 失败: {error_msg}")

    def __reduce__(self):
        return self.__class__, (self.stage, self.stage_msg)
