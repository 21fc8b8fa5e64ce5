# -*- coding: utf-8 -*-
"""
合成数据集服务
背景由基准原型加噪声构成，动作片段覆盖为类别原型加噪声，整体做滑动平均，使相邻 clip 高度相似
evidence_rate < 1 时动作片段以类别无关的动作原型为底，只有少数 clip 叠加类别原型（稀疏关键 clip）
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from models.records import ActionInstance, AnnotationSet, VideoAnnotation
from models.run_config import SyntheticDatasetSpec
from utils.errors import InvalidArgumentError, SamplingError
from utils.retry_decorator import retry_on_failure

logger = logging.getLogger(__name__)


@dataclass
class LabeledVideo:
    """一段视频的 clip 特征 (T, D_in) 与其真实动作"""
    video_id: str
    features: np.ndarray
    instances: List[ActionInstance] = field(default_factory=list)

    @property
    def num_clips(self) -> int:
        return int(self.features.shape[0])

    def __iter__(self):
        # 允许 features, instances = video 的解包写法
        return iter((self.features, self.instances))


def class_names(num_classes: int) -> List[str]:
    return [f"action_{index}" for index in range(num_classes)]


def moving_average(x: np.ndarray, width: int) -> np.ndarray:
    """沿时间轴的居中滑动平均；边界只对窗口内实际存在的 clip 求平均"""
    if width <= 1:
        return x.copy()
    left = (width - 1) // 2
    right = width - 1 - left
    padded = np.pad(x, ((left, right), (0, 0)))
    counts = np.pad(np.ones(x.shape[0]), (left, right))
    kernel = np.ones(width)
    sums = np.stack([np.convolve(padded[:, c], kernel, mode='valid') for c in range(x.shape[1])], axis=1)
    support = np.convolve(counts, kernel, mode='valid')
    return sums / support[:, None]


def _overlaps(start: int, end: int, taken: Sequence[Tuple[int, int]]) -> bool:
    return any(start < t_end and t_start < end for t_start, t_end in taken)


def _sample_instances(spec: SyntheticDatasetSpec, rng: np.random.Generator) -> List[Tuple[int, int, int]]:
    """为一段视频抽取互不重叠的 (start, end, label)"""
    low, high = spec.instances_per_video
    count = int(rng.integers(low, high + 1))
    max_duration = min(spec.max_duration, spec.length)

    @retry_on_failure(max_attempts=spec.max_attempts)
    def place(taken: List[Tuple[int, int]]) -> Tuple[int, int]:
        if spec.min_duration > spec.length:
            raise SamplingError(f"最短动作时长 {spec.min_duration} 超过视频长度 {spec.length}")
        duration = int(rng.integers(spec.min_duration, max_duration + 1))
        start = int(rng.integers(0, spec.length - duration + 1))
        if _overlaps(start, start + duration, taken):
            raise SamplingError(f"片段 [{start}, {start + duration}) 与已有实例重叠")
        return start, start + duration

    taken: List[Tuple[int, int]] = []
    labels = []
    for _ in range(count):
        taken.append(place(taken))
        labels.append(int(rng.integers(0, spec.num_classes)))
    return [(s, e, label) for (s, e), label in zip(taken, labels)]


def _instance_clips(spec: SyntheticDatasetSpec, rng: np.random.Generator, prototype: np.ndarray,
                    action: Optional[np.ndarray], duration: int) -> np.ndarray:
    noise = spec.noise_scale * rng.standard_normal((duration, spec.input_dim))
    if action is None:
        return prototype + noise
    # 每个实例至少有一个关键 clip
    evidence = rng.random(duration) < spec.evidence_rate
    evidence[rng.integers(0, duration)] = True
    return action + noise + evidence[:, None] * prototype


def generate_synthetic_dataset(spec: SyntheticDatasetSpec, id_prefix: str = 'video') -> List[LabeledVideo]:
    """按规格生成合成数据集，同一 seed 得到逐位相同的结果

    Args:
        spec: 数据集规格
        id_prefix: 视频 id 前缀，id 形如 video_000

    Returns:
        List[LabeledVideo]: 每段视频的特征与真实动作

    Raises:
        SamplingError: 实例放置在有限次重试后仍失败
    """
    rng = np.random.default_rng(spec.seed)
    base = rng.normal(0.0, spec.prototype_scale, size=spec.input_dim)
    prototypes = rng.normal(0.0, spec.prototype_scale, size=(spec.num_classes, spec.input_dim))
    action = None
    if spec.evidence_rate < 1.0:
        action = rng.normal(0.0, spec.prototype_scale, size=spec.input_dim)

    videos = []
    for index in range(spec.num_videos):
        placed = _sample_instances(spec, rng)
        features = base + spec.noise_scale * rng.standard_normal((spec.length, spec.input_dim))
        instances = []
        for start, end, label in sorted(placed):
            features[start:end] = _instance_clips(spec, rng, prototypes[label], action, end - start)
            instances.append(ActionInstance(start=float(start), end=float(end), label=label))
        features = moving_average(features, spec.smoothing_width)
        videos.append(LabeledVideo(f"{id_prefix}_{index:03d}", features, instances))

    total = sum(len(v.instances) for v in videos)
    logger.info(f"生成合成数据集: {len(videos)} 段视频, {total} 个动作实例, seed={spec.seed}")
    return videos


def split_dataset(videos: Sequence[LabeledVideo], train_count: int) -> Tuple[List[LabeledVideo], List[LabeledVideo]]:
    if not 0 < train_count <= len(videos):
        raise InvalidArgumentError(f"训练集大小 {train_count} 超出数据集大小 {len(videos)}")
    return list(videos[:train_count]), list(videos[train_count:])


def to_annotation_set(videos: Sequence[LabeledVideo], classes: Optional[List[str]] = None,
                      num_classes: Optional[int] = None) -> AnnotationSet:
    if classes is None:
        if num_classes is None:
            num_classes = max((inst.label for v in videos for inst in v.instances), default=-1) + 1
        classes = class_names(max(num_classes, 1))
    return AnnotationSet(
        version=1,
        classes=classes,
        videos=[VideoAnnotation(id=v.video_id, num_clips=v.num_clips, instances=list(v.instances))
                for v in videos],
    )


def attach_annotations(features: Dict[str, np.ndarray], annotations: AnnotationSet) -> List[LabeledVideo]:
    """按标注集合的视频顺序把特征与真实动作配对"""
    videos = []
    for video in annotations.videos:
        if video.id not in features:
            raise InvalidArgumentError(f"缺少视频 {video.id} 的特征")
        x = features[video.id]
        if x.shape[0] != video.num_clips:
            raise InvalidArgumentError(
                f"视频 {video.id} 的特征长度 {x.shape[0]} 与标注 num_clips {video.num_clips} 不一致"
            )
        videos.append(LabeledVideo(video.id, x, list(video.instances)))
    return videos
