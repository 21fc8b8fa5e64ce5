# -*- coding: utf-8 -*-
"""
推理服务
把逐时刻的 (logits, o^s, o^e) 解码为带分数的片段，再用 Soft-NMS（或 hard NMS）去重
"""

import logging
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from models.records import ScoredSegment
from models.run_config import InferenceConfig, ModelConfig, NmsMode
from services.dataset_service import LabeledVideo
from services.evaluation_service import tiou_matrix
from services.loss_service import sigmoid
from services.model_service import HeadOutputs, ModelParams, model_forward
from utils.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

MIN_SEGMENT_LENGTH = 1e-6


def _ordering(starts: np.ndarray, ends: np.ndarray, labels: np.ndarray, scores: np.ndarray) -> np.ndarray:
    # 分数降序，之后按 start、end、label 升序
    return np.lexsort((labels, ends, starts, -scores))


def decode_predictions(outputs: HeadOutputs, config: Optional[InferenceConfig] = None,
                       score_threshold: Optional[float] = None, pre_nms_topk: Optional[int] = None,
                       video_id: str = 'video') -> List[ScoredSegment]:
    """把头部输出解码为候选片段

    第 l 层第 t 个时刻位于输入坐标 t * 2^(l-1)，片段为 [coord - o^s, coord + o^e]，
    端点裁剪到 [0, num_clips]，长度不超过 1e-6 的片段丢弃

    Args:
        outputs: 一段视频的头部输出
        config: 推理参数
        score_threshold: 覆盖 config 中的分数阈值（严格大于才保留）
        pre_nms_topk: 覆盖 config 中每段视频保留的候选数
        video_id: 写入片段的视频 id
    """
    config = config or InferenceConfig()
    threshold = config.score_threshold if score_threshold is None else score_threshold
    topk = config.pre_nms_topk if pre_nms_topk is None else pre_nms_topk
    if not 0.0 <= threshold <= 1.0:
        raise InvalidArgumentError(f"score_threshold 必须位于 [0, 1]: {threshold}")

    starts, ends, labels, scores = [], [], [], []
    for level in outputs.levels:
        valid = level.valid_length
        probs = sigmoid(level.logits.data[:valid])
        offsets = level.offsets.data[:valid] * level.stride
        coords = np.arange(valid, dtype=np.float64) * level.stride
        rows, cols = np.nonzero(probs > threshold)
        if not len(rows):
            continue
        seg_start = np.clip(coords[rows] - offsets[rows, 0], 0.0, outputs.num_clips)
        seg_end = np.clip(coords[rows] + offsets[rows, 1], 0.0, outputs.num_clips)
        keep = seg_end - seg_start > MIN_SEGMENT_LENGTH
        starts.append(seg_start[keep])
        ends.append(seg_end[keep])
        labels.append(cols[keep])
        scores.append(probs[rows, cols][keep])

    if not starts:
        return []
    starts, ends = np.concatenate(starts), np.concatenate(ends)
    labels, scores = np.concatenate(labels), np.concatenate(scores)
    order = _ordering(starts, ends, labels, scores)[:topk]
    return [
        ScoredSegment(video_id=video_id, start=float(starts[i]), end=float(ends[i]),
                      label=int(labels[i]), score=float(scores[i]))
        for i in order
    ]


def _suppress_video(segments: Sequence[ScoredSegment], sigma: float, min_score: float, mode: NmsMode,
                    iou_threshold: float, max_segments: Optional[int]) -> List[ScoredSegment]:
    starts = np.array([s.start for s in segments], dtype=np.float64)
    ends = np.array([s.end for s in segments], dtype=np.float64)
    labels = np.array([s.label for s in segments], dtype=np.int64)
    scores = np.array([s.score for s in segments], dtype=np.float64)
    order = _ordering(starts, ends, labels, scores)
    starts, ends, labels, scores = starts[order], ends[order], labels[order], scores[order]
    source = [segments[i] for i in order]

    remaining = np.arange(len(source))
    kept = []
    while len(remaining):
        # argmax 取第一个最大值，配合上面的排序保证确定性
        pick = remaining[int(np.argmax(scores[remaining]))]
        kept.append((pick, float(scores[pick])))
        if max_segments is not None and len(kept) >= max_segments:
            break
        remaining = remaining[remaining != pick]
        if not len(remaining):
            break
        overlaps = tiou_matrix(starts[remaining], ends[remaining], starts[pick], ends[pick])
        if mode == NmsMode.SOFT:
            scores[remaining] = scores[remaining] * np.exp(-(overlaps ** 2) / sigma)
            remaining = remaining[scores[remaining] >= min_score]
        else:
            remaining = remaining[overlaps <= iou_threshold]

    return [source[index].model_copy(update={'score': score}) for index, score in kept]


def soft_nms(segments: Sequence[ScoredSegment], sigma: float = 0.5, min_score: float = 0.001,
             mode: NmsMode = NmsMode.SOFT, iou_threshold: float = 0.5,
             max_segments: Optional[int] = None) -> List[ScoredSegment]:
    """按视频分组、类别无关的 Gaussian Soft-NMS

    每轮选出当前分数最高的片段，其余片段分数乘以 exp(-tIoU^2 / sigma)，低于 min_score 的丢弃；
    hard 模式下直接删除 tIoU > iou_threshold 的片段。每段视频的输出按（衰减后）分数非增排列
    """
    if sigma <= 0:
        raise InvalidArgumentError(f"sigma 必须 > 0: {sigma}")
    grouped: Dict[str, List[ScoredSegment]] = {}
    for segment in segments:
        grouped.setdefault(segment.video_id, []).append(segment)

    result = []
    for video_id, items in grouped.items():
        result.extend(_suppress_video(items, sigma, min_score, NmsMode(mode), iou_threshold, max_segments))
    return result


def postprocess(segments: Sequence[ScoredSegment], config: InferenceConfig) -> List[ScoredSegment]:
    return soft_nms(segments, config.sigma, config.min_score, config.nms_mode,
                    config.iou_threshold, config.max_segments)


def infer_video(video: LabeledVideo, params: ModelParams, model_config: ModelConfig,
                config: Optional[InferenceConfig] = None) -> List[ScoredSegment]:
    config = config or InferenceConfig()
    outputs = model_forward(video.features, params, model_config)
    candidates = decode_predictions(outputs, config, video_id=video.video_id)
    return postprocess(candidates, config)


def infer_dataset(videos: Iterable[LabeledVideo], params: ModelParams, model_config: ModelConfig,
                  config: Optional[InferenceConfig] = None) -> List[ScoredSegment]:
    """对每段视频推理，按视频顺序拼接结果"""
    segments: List[ScoredSegment] = []
    for video in videos:
        found = infer_video(video, params, model_config, config)
        logger.debug(f"视频 {video.video_id}: {len(found)} 个预测片段")
        segments.extend(found)
    return segments


class InferenceService:
    """推理服务：固定模型结构与后处理参数，对任意参数快照推理"""

    def __init__(self, model_config: ModelConfig, config: Optional[InferenceConfig] = None):
        self.model_config = model_config
        self.config = config or InferenceConfig()

    def predict(self, videos: Iterable[LabeledVideo], params: ModelParams) -> List[ScoredSegment]:
        return infer_dataset(videos, params, self.model_config, self.config)
