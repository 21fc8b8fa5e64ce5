# utils/errors.py
"""
异常定义
所有模块统一抛出 TemporalMaxerError 的子类，CLI 据此输出单行诊断信息
"""

from typing import Optional


class TemporalMaxerError(Exception):
    """项目异常基类"""


class InvalidArgumentError(TemporalMaxerError, ValueError):
    """参数或形状不满足前置条件"""


class ConfigError(TemporalMaxerError):
    """运行配置文件无效"""


class AnnotationError(TemporalMaxerError):
    """标注/预测文件不符合 schema"""


class FeatureFileError(TemporalMaxerError):
    """二进制特征文件或检查点文件损坏

    Args:
        message: 错误描述
        offset: 出错位置的字节偏移
    """

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class SamplingError(TemporalMaxerError):
    """合成数据的动作实例无法放入视频"""


class NonFiniteGradientError(TemporalMaxerError):
    """梯度中出现 NaN/Inf"""

    def __init__(self, group: str):
        self.group = group
        super().__init__(f"参数组 {group} 的梯度不是有限值")


class TrainingDivergedError(TemporalMaxerError):
    """训练损失发散"""

    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"训练在第 {step} 步发散: loss={loss}")
