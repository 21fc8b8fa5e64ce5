# -*- coding: utf-8 -*-
"""
无锚框标签分配
第 l 层的第 t 个时刻位于输入坐标 t * 2^(l-1)；中心采样 + 每层回归范围 + 最短实例优先
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from models.records import ActionInstance
from models.run_config import AssignConfig
from utils.errors import InvalidArgumentError

logger = logging.getLogger(__name__)


@dataclass
class LevelTargets:
    """单层目标：positive 标记、目标类别（背景为 -1）、输入单位的 (o^s, o^e)、有效性"""
    positive: np.ndarray
    labels: np.ndarray
    offsets: np.ndarray
    valid: np.ndarray
    stride: int

    @property
    def coords(self) -> np.ndarray:
        return np.arange(len(self.positive), dtype=np.float64) * self.stride


@dataclass
class TargetAssignment:
    levels: List[LevelTargets]

    @property
    def num_positive(self) -> int:
        return int(sum(level.positive.sum() for level in self.levels))


def validate_instances(instances: Sequence[ActionInstance], num_clips: int, num_classes: Optional[int] = None) -> None:
    """实例必须落在 [0, T] 内且类别合法"""
    for index, inst in enumerate(instances):
        if inst.start < 0 or inst.end > num_clips:
            raise InvalidArgumentError(
                f"实例 {index} [{inst.start}, {inst.end}] 超出视频范围 [0, {num_clips}]"
            )
        if num_classes is not None and inst.label >= num_classes:
            raise InvalidArgumentError(f"实例 {index} 的类别 {inst.label} 超出类别数 {num_classes}")


def assign_targets(instances: Sequence[ActionInstance], level_lengths: Sequence[int],
                   config: AssignConfig, valid_lengths: Optional[Sequence[int]] = None) -> TargetAssignment:
    """为金字塔每一层的每个时刻分配训练目标

    Args:
        instances: 该视频的真实动作
        level_lengths: 各层长度
        config: 中心采样半径与回归范围
        valid_lengths: 各层有效长度（批内填充时使用），padding 位置一律为背景且被排除

    Returns:
        TargetAssignment: 逐层的目标
    """
    ranges = config.ranges_for(len(level_lengths))
    if valid_lengths is None:
        valid_lengths = list(level_lengths)

    starts = np.array([inst.start for inst in instances], dtype=np.float64)
    ends = np.array([inst.end for inst in instances], dtype=np.float64)
    labels = np.array([inst.label for inst in instances], dtype=np.int64)
    durations = ends - starts
    centers = 0.5 * (starts + ends)

    levels = []
    for level, (length, valid_len, (low, high)) in enumerate(zip(level_lengths, valid_lengths, ranges)):
        stride = 2 ** level
        coords = np.arange(length, dtype=np.float64) * stride
        valid = np.arange(length) < valid_len
        positive = np.zeros(length, dtype=bool)
        target_labels = np.full(length, -1, dtype=np.int64)
        target_offsets = np.zeros((length, 2), dtype=np.float64)

        if len(instances):
            # (length, N)
            left = coords[:, None] - starts[None, :]
            right = ends[None, :] - coords[:, None]
            radius = config.center_radius * stride
            region_lo = np.maximum(starts, centers - radius)
            region_hi = np.minimum(ends, centers + radius)
            in_center = (coords[:, None] >= region_lo[None, :]) & (coords[:, None] <= region_hi[None, :])
            inside = (left > 0) & (right > 0)
            reach = np.maximum(left, right)
            in_range = (reach >= low) & (reach < high)
            candidate = in_center & inside & in_range & valid[:, None]

            cost = np.where(candidate, durations[None, :], np.inf)
            # 多个实例命中时取时长最短者，并列取下标最小者
            best = cost.argmin(axis=1)
            positive = candidate.any(axis=1)
            rows = np.nonzero(positive)[0]
            chosen = best[rows]
            target_labels[rows] = labels[chosen]
            target_offsets[rows, 0] = left[rows, chosen]
            target_offsets[rows, 1] = right[rows, chosen]

        levels.append(LevelTargets(positive, target_labels, target_offsets, valid, stride))

    assignment = TargetAssignment(levels)
    logger.debug(f"标签分配完成: {len(instances)} 个实例, {assignment.num_positive} 个正样本")
    return assignment
