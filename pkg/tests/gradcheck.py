# tests/gradcheck.py
"""中心差分梯度检查工具"""

from typing import Callable, List, Sequence

import numpy as np

from numerics.tensor import GradTape, Node, Parameter, SeqTensor

STEP = 1e-5


def numeric_grad(loss: Callable[[], float], array: np.ndarray, h: float = STEP) -> np.ndarray:
    """逐元素中心差分；array 被原地扰动后恢复"""
    grad = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        orig = array[idx]
        array[idx] = orig + h
        plus = loss()
        array[idx] = orig - h
        minus = loss()
        array[idx] = orig
        grad[idx] = (plus - minus) / (2 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """按范数的相对误差"""
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def _wrap(arrays: Sequence[np.ndarray], seq_inputs: int) -> List[Node]:
    return [SeqTensor(a) if i < seq_inputs else Parameter(a) for i, a in enumerate(arrays)]


def check_op(forward: Callable[[List[Node], GradTape], Node], arrays: Sequence[np.ndarray],
             seq_inputs: int = 1, seed: int = 0, h: float = STEP) -> List[float]:
    """对 sum(out * R) 比较解析梯度与数值梯度，返回每个输入的相对误差

    Args:
        forward: forward(nodes, tape) -> 输出节点
        arrays: 输入数组（前 seq_inputs 个包装为 SeqTensor，其余为 Parameter）
    """
    nodes = _wrap(arrays, seq_inputs)
    tape = GradTape()
    out = forward(nodes, tape)
    weights = np.random.default_rng(seed).standard_normal(out.data.shape)
    tape.backward({out: weights})
    analytic = [n.grad if n.grad is not None else np.zeros_like(n.data) for n in nodes]

    def loss() -> float:
        return float(np.sum(forward(_wrap(arrays, seq_inputs), None).data * weights))

    return [rel_error(g, numeric_grad(loss, a, h)) for g, a in zip(analytic, arrays)]


def directional_check(loss: Callable[[np.ndarray], float], point: np.ndarray, grad: np.ndarray,
                      directions: int = 2, seed: int = 0, h: float = STEP, floor: float = 1e-12) -> float:
    """沿随机单位方向比较 grad·v 与中心差分，返回相对于梯度范数的最大误差；floor 为误差尺度下限"""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(directions):
        v = rng.standard_normal(point.shape)
        v /= np.linalg.norm(v)
        numeric = (loss(point + h * v) - loss(point - h * v)) / (2 * h)
        analytic = float(np.sum(grad * v))
        scale = max(abs(numeric) + abs(analytic), float(np.linalg.norm(grad)), floor)
        worst = max(worst, abs(numeric - analytic) / scale)
    return worst
