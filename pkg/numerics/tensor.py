# -*- coding: utf-8 -*-
"""
时间优先（time-major）张量与梯度磁带
SeqTensor 的数据布局为 (T, C)，所有计算使用 float64
"""

from typing import Callable, Dict, List, Optional

import numpy as np

from utils.errors import InvalidArgumentError

DTYPE = np.float64


class Node:
    """参与反向传播的数值节点"""

    __slots__ = ('data', 'grad', 'name')

    def __init__(self, data: np.ndarray, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, grad: np.ndarray) -> None:
        """累加上游梯度"""
        if self.grad is None:
            self.grad = np.array(grad, dtype=DTYPE, copy=True)
        else:
            self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None


class Parameter(Node):
    """可学习参数（任意形状）"""

    __slots__ = ()

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.data.shape})"


class SeqTensor(Node):
    """T×C 的时间序列张量

    Args:
        data: 二维数组，索引为 (t, c)
        name: 可选名称，便于调试
    """

    __slots__ = ()

    def __init__(self, data: np.ndarray, name: Optional[str] = None):
        super().__init__(data, name)
        if self.data.ndim != 2:
            raise InvalidArgumentError(f"SeqTensor 需要二维数据 (T, C)，实际维度 {self.data.ndim}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise InvalidArgumentError(f"SeqTensor 形状非法: {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise InvalidArgumentError("SeqTensor 含有非有限值")

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    def __repr__(self) -> str:
        return f"SeqTensor(T={self.length}, C={self.channels})"


class GradTape:
    """记录前向算子的反向规则

    一个训练步骤独占一条磁带；backward 按记录的逆序回放
    """

    def __init__(self):
        self._records: List[Callable[[], None]] = []

    def __len__(self) -> int:
        return len(self._records)

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._records.append(backward_fn)

    def backward(self, seeds: Dict[Node, np.ndarray]) -> None:
        """从给定输出梯度开始反向传播

        Args:
            seeds: 输出节点 -> 该节点的上游梯度
        """
        for node, grad in seeds.items():
            if grad.shape != node.data.shape:
                raise InvalidArgumentError(
                    f"种子梯度形状 {grad.shape} 与节点形状 {node.data.shape} 不一致"
                )
            node.accumulate(grad)
        for backward_fn in reversed(self._records):
            backward_fn()
        self._records.clear()


def as_seq(data, name: Optional[str] = None) -> SeqTensor:
    """把数组包装成 SeqTensor（已经是 SeqTensor 时原样返回）"""
    if isinstance(data, SeqTensor):
        return data
    return SeqTensor(np.asarray(data, dtype=DTYPE), name)


def as_param(data, name: Optional[str] = None) -> Node:
    if isinstance(data, Node):
        return data
    return Parameter(np.asarray(data, dtype=DTYPE), name)
