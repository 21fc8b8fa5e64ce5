# -*- coding: utf-8 -*-
"""
训练目标
L_total = sum_t (L_cls + 1{c_t} * L_reg) / max(T_+, 1)，对所有金字塔层求和，再在批内视频间取平均
分类用 sigmoid focal loss，回归用 DIoU loss；梯度以解析形式给出
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from models.run_config import LossConfig
from numerics.tensor import Node
from services.model_service import HeadOutputs
from services.target_service import TargetAssignment
from utils.errors import InvalidArgumentError

logger = logging.getLogger(__name__)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """数值稳定的 sigmoid"""
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def focal_loss_terms(logits: np.ndarray, targets: np.ndarray, alpha: Optional[float] = 0.25,
                     gamma: float = 2.0, clamp: float = 1e-12) -> Tuple[np.ndarray, np.ndarray]:
    """逐元素 sigmoid focal loss 及其对 logit 的梯度

    Args:
        logits: (N, C) 分类 logit
        targets: (N, C) one-hot 目标（背景整行为 0）
        alpha: 正类权重；None 表示不做 alpha 加权
        gamma: 调制因子指数
        clamp: log 内概率的下限

    Returns:
        Tuple[np.ndarray, np.ndarray]: (逐元素损失, 逐元素梯度)
    """
    positive = targets > 0.5
    sign = np.where(positive, 1.0, -1.0)
    # p_t 与 1-p_t 都直接由 sigmoid(±x) 计算，避免 1-p 的抵消误差
    p_t = sigmoid(sign * logits)
    q = sigmoid(-sign * logits)
    if alpha is None:
        alpha_t = np.ones_like(logits)
    else:
        alpha_t = np.where(positive, alpha, 1.0 - alpha)

    clamped = np.maximum(p_t, clamp)
    log_p = np.log(np.minimum(clamped, 1.0))
    modulator = q ** gamma
    loss = -alpha_t * modulator * log_p

    # d/dx: 调制项经由 q 的导数，加上 log(p_t) 的导数（被截断时为 0）
    grad = sign * alpha_t * (gamma * modulator * p_t * log_p - modulator * q * (p_t >= clamp))
    return loss, grad


def focal_loss(logits, target: int, alpha: Optional[float] = 0.25, gamma: float = 2.0,
               clamp: float = 1e-12) -> float:
    """单个时刻的 one-vs-all focal loss，target 为类别下标或 -1（背景）"""
    logits = np.atleast_1d(np.asarray(logits, dtype=np.float64))
    targets = np.zeros_like(logits)
    if target >= 0:
        targets[target] = 1.0
    loss, _ = focal_loss_terms(logits[None, :], targets[None, :], alpha, gamma, clamp)
    return float(loss.sum())


def diou_terms(pred_start: np.ndarray, pred_end: np.ndarray, target_start: np.ndarray,
               target_end: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """一维 DIoU loss 与对预测端点的梯度

    Returns:
        Tuple: (loss, d loss / d pred_start, d loss / d pred_end)
    """
    inner_lo = np.maximum(pred_start, target_start)
    inner_hi = np.minimum(pred_end, target_end)
    raw_inter = inner_hi - inner_lo
    overlap = raw_inter > 0
    inter = np.where(overlap, raw_inter, 0.0)
    d_inter_ds = np.where(overlap & (pred_start > target_start), -1.0, 0.0)
    d_inter_de = np.where(overlap & (pred_end < target_end), 1.0, 0.0)

    union = (pred_end - pred_start) + (target_end - target_start) - inter
    d_union_ds = -1.0 - d_inter_ds
    d_union_de = 1.0 - d_inter_de
    iou = inter / union
    d_iou_ds = (d_inter_ds * union - inter * d_union_ds) / union ** 2
    d_iou_de = (d_inter_de * union - inter * d_union_de) / union ** 2

    enclose = np.maximum(pred_end, target_end) - np.minimum(pred_start, target_start)
    d_enc_ds = np.where(pred_start > target_start, 0.0, -1.0)
    d_enc_de = np.where(pred_end < target_end, 0.0, 1.0)
    rho = 0.5 * (pred_start + pred_end) - 0.5 * (target_start + target_end)
    penalty = rho ** 2 / enclose ** 2
    d_pen_ds = rho / enclose ** 2 - 2.0 * rho ** 2 / enclose ** 3 * d_enc_ds
    d_pen_de = rho / enclose ** 2 - 2.0 * rho ** 2 / enclose ** 3 * d_enc_de

    loss = 1.0 - iou + penalty
    return loss, -d_iou_ds + d_pen_ds, -d_iou_de + d_pen_de


def segment_diou_loss(a: Sequence[float], b: Sequence[float]) -> float:
    """任意两个线段的 DIoU loss：1 - IoU + d^2 / c^2"""
    loss, _, _ = diou_terms(np.array([a[0]], dtype=np.float64), np.array([a[1]], dtype=np.float64),
                            np.array([b[0]], dtype=np.float64), np.array([b[1]], dtype=np.float64))
    return float(loss[0])


def diou_loss(pred: Sequence[float], target: Sequence[float], anchor_coord: float) -> float:
    """以锚点坐标重建 [coord - o^s, coord + o^e] 后计算 DIoU

    Args:
        pred: 预测 (o^s, o^e)，非负；两者皆 0 时视为一个点，IoU = 0
        target: 目标 (o^s, o^e)，为正
        anchor_coord: 时刻在输入网格上的坐标
    """
    if target[0] <= 0 or target[1] <= 0:
        raise InvalidArgumentError(f"目标偏移必须为正: {tuple(target)}")
    return segment_diou_loss((anchor_coord - pred[0], anchor_coord + pred[1]),
                             (anchor_coord - target[0], anchor_coord + target[1]))


@dataclass
class LossResult:
    """一个批次的损失值与对头部输出节点的梯度种子"""
    value: float
    cls_loss: float
    reg_loss: float
    num_positive: int
    seeds: Dict[Node, np.ndarray] = field(default_factory=dict)


def _video_loss(outputs: HeadOutputs, assignment: TargetAssignment, config: LossConfig,
                weight: float, seeds: Dict[Node, np.ndarray]) -> Tuple[float, float, int]:
    if len(outputs.levels) != len(assignment.levels):
        raise InvalidArgumentError(
            f"头部输出有 {len(outputs.levels)} 层，但标签分配有 {len(assignment.levels)} 层"
        )
    num_pos = assignment.num_positive
    norm = float(max(num_pos, 1))
    cls_total, reg_total = 0.0, 0.0

    for out, target in zip(outputs.levels, assignment.levels):
        logits = out.logits.data
        if logits.shape[0] != len(target.positive):
            raise InvalidArgumentError(
                f"层长度不一致: 输出 {logits.shape[0]} vs 目标 {len(target.positive)}"
            )
        one_hot = np.zeros_like(logits)
        rows = np.nonzero(target.positive)[0]
        one_hot[rows, target.labels[rows]] = 1.0
        cls_loss, cls_grad = focal_loss_terms(logits, one_hot, config.focal_alpha,
                                              config.focal_gamma, config.prob_clamp)
        valid = target.valid[:, None]
        cls_total += float((cls_loss * valid).sum())
        seeds[out.logits] = cls_grad * valid * (weight / norm)

        offset_grad = np.zeros_like(out.offsets.data)
        if len(rows):
            coords = rows.astype(np.float64) * out.stride
            pred = out.offsets.data[rows] * out.stride
            tgt = target.offsets[rows]
            loss, d_start, d_end = diou_terms(coords - pred[:, 0], coords + pred[:, 1],
                                              coords - tgt[:, 0], coords + tgt[:, 1])
            reg_total += float(loss.sum())
            # s = coord - stride * o^s，e = coord + stride * o^e
            offset_grad[rows, 0] = -d_start * out.stride
            offset_grad[rows, 1] = d_end * out.stride
        seeds[out.offsets] = offset_grad * (weight / norm)

    return cls_total / norm, reg_total / norm, num_pos


def total_loss(outputs, assignments, config: Optional[LossConfig] = None) -> LossResult:
    """批次总损失

    Args:
        outputs: 单个 HeadOutputs 或其列表（批内各视频）
        assignments: 对应的 TargetAssignment 或其列表
        config: 损失超参数

    Returns:
        LossResult: 损失值（批内平均）与梯度种子
    """
    config = config or LossConfig()
    if isinstance(outputs, HeadOutputs):
        outputs, assignments = [outputs], [assignments]
    if len(outputs) != len(assignments) or not outputs:
        raise InvalidArgumentError("输出与标签分配的数量必须一致且非空")

    weight = 1.0 / len(outputs)
    seeds: Dict[Node, np.ndarray] = {}
    cls_sum, reg_sum, positives = 0.0, 0.0, 0
    for video_out, video_target in zip(outputs, assignments):
        cls_loss, reg_loss, num_pos = _video_loss(video_out, video_target, config, weight, seeds)
        cls_sum += cls_loss
        reg_sum += reg_loss
        positives += num_pos

    cls_mean, reg_mean = cls_sum * weight, reg_sum * weight
    return LossResult(cls_mean + reg_mean, cls_mean, reg_mean, positives, seeds)


def loss_breakdown(results: List[LossResult]) -> Dict[str, float]:
    if not results:
        return {'loss': 0.0, 'cls': 0.0, 'reg': 0.0}
    n = len(results)
    return {
        'loss': sum(r.value for r in results) / n,
        'cls': sum(r.cls_loss for r in results) / n,
        'reg': sum(r.reg_loss for r in results) / n,
    }
