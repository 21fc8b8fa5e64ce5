# -*- coding: utf-8 -*-
"""
评估服务
tIoU（一维 Jaccard 指数）、单类 AP（全点插值）、多阈值 mAP，以及相邻 clip 余弦相似度诊断
"""

import logging
from collections import defaultdict
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from models.records import ActionInstance, AnnotationSet, EvalReport, ScoredSegment
from utils.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = [0.3, 0.4, 0.5, 0.6, 0.7]

GroundTruth = Union[AnnotationSet, Mapping[str, Sequence[ActionInstance]]]


def _bounds(segment):
    if hasattr(segment, 'start'):
        return float(segment.start), float(segment.end)
    start, end = segment[0], segment[1]
    return float(start), float(end)


def tiou(a, b) -> float:
    """|a ∩ b| / |a ∪ b|；a、b 可以是 (start, end) 或带 start/end 属性的对象"""
    a_start, a_end = _bounds(a)
    b_start, b_end = _bounds(b)
    if a_end <= a_start or b_end <= b_start:
        raise InvalidArgumentError(f"非法片段: [{a_start}, {a_end}] / [{b_start}, {b_end}]")
    inter = max(0.0, min(a_end, b_end) - max(a_start, b_start))
    union = (a_end - a_start) + (b_end - b_start) - inter
    return inter / union


def tiou_matrix(starts: np.ndarray, ends: np.ndarray, ref_start: float, ref_end: float) -> np.ndarray:
    """一批片段与单个参考片段的 tIoU"""
    inter = np.clip(np.minimum(ends, ref_end) - np.maximum(starts, ref_start), 0.0, None)
    union = (ends - starts) + (ref_end - ref_start) - inter
    return inter / union


def _ap_from_pr(prec: np.ndarray, rec: np.ndarray) -> float:
    mprec = np.hstack([[0.0], prec, [0.0]])
    mrec = np.hstack([[0.0], rec, [1.0]])

    # 精度包络：从右向左取累积最大
    for i in range(len(mprec) - 1)[::-1]:
        mprec[i] = max(mprec[i], mprec[i + 1])

    idx = np.where(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def sort_predictions(predictions: Sequence[ScoredSegment]) -> List[ScoredSegment]:
    """按分数降序，分数相同时按 start、end、video_id 升序"""
    return sorted(predictions, key=lambda p: (-p.score, p.start, p.end, p.video_id))


def average_precision(predictions: Sequence[ScoredSegment],
                      gt: Union[Mapping[str, Sequence[ActionInstance]], Sequence[ActionInstance]],
                      threshold: float) -> float:
    """单个类别在给定 tIoU 阈值下的 AP

    Args:
        predictions: 该类别的预测
        gt: video_id -> 该类别的真实动作；传入列表时不区分视频
        threshold: tIoU 阈值

    Raises:
        InvalidArgumentError: 没有任何真实动作（AP 无定义）
    """
    if not isinstance(gt, Mapping):
        gt = {None: list(gt)}
        video_of = lambda p: None  # noqa: E731
    else:
        video_of = lambda p: p.video_id  # noqa: E731

    num_positive = sum(len(items) for items in gt.values())
    if num_positive == 0:
        raise InvalidArgumentError("真实动作为空，AP 无定义")
    if not predictions:
        return 0.0

    matched = {video: np.zeros(len(items), dtype=bool) for video, items in gt.items()}
    bounds = {
        video: (np.array([g.start for g in items], dtype=np.float64),
                np.array([g.end for g in items], dtype=np.float64))
        for video, items in gt.items()
    }

    ordered = sort_predictions(predictions)
    tp = np.zeros(len(ordered))
    for rank, pred in enumerate(ordered):
        video = video_of(pred)
        if video not in bounds or len(bounds[video][0]) == 0:
            continue
        starts, ends = bounds[video]
        overlaps = tiou_matrix(starts, ends, pred.start, pred.end)
        overlaps[matched[video]] = -1.0
        best = int(np.argmax(overlaps))
        if overlaps[best] >= threshold:
            tp[rank] = 1.0
            matched[video][best] = True

    cum_tp = np.cumsum(tp)
    rec = cum_tp / num_positive
    prec = cum_tp / np.arange(1, len(ordered) + 1)
    return _ap_from_pr(prec, rec)


def _ground_truth(gt: GroundTruth) -> Dict[str, List[ActionInstance]]:
    if isinstance(gt, AnnotationSet):
        return gt.ground_truth()
    return {video: list(items) for video, items in gt.items()}


def mean_ap(predictions: Sequence[ScoredSegment], gt: GroundTruth,
            thresholds: Optional[Sequence[float]] = None) -> EvalReport:
    """逐阈值对 GT 中出现的类别求 AP 平均，再对阈值取平均；GT 中没有的类别跳过"""
    thresholds = list(thresholds) if thresholds is not None else list(DEFAULT_THRESHOLDS)
    ground_truth = _ground_truth(gt)
    labels = sorted({inst.label for items in ground_truth.values() for inst in items})

    by_label: Dict[int, List[ScoredSegment]] = defaultdict(list)
    for pred in predictions:
        by_label[pred.label].append(pred)

    per_class: Dict[int, List[float]] = {}
    for label in labels:
        class_gt = {video: [g for g in items if g.label == label] for video, items in ground_truth.items()}
        per_class[label] = [average_precision(by_label[label], class_gt, t) for t in thresholds]

    if labels:
        map_per_threshold = [float(np.mean([per_class[label][i] for label in labels]))
                             for i in range(len(thresholds))]
    else:
        map_per_threshold = [0.0 for _ in thresholds]
    report = EvalReport(
        tiou_thresholds=thresholds,
        per_class_ap=per_class,
        map_per_threshold=map_per_threshold,
        average_map=float(np.mean(map_per_threshold)),
        num_ground_truth=sum(len(items) for items in ground_truth.values()),
        num_predictions=len(predictions),
    )
    logger.info(f"评估完成: average mAP={report.average_map:.4f}, "
                f"{report.num_ground_truth} 个真实动作, {report.num_predictions} 个预测")
    return report


def cosine_similarity_matrix(x) -> np.ndarray:
    """S[i][j] = <x_i, x_j> / (|x_i| |x_j|)，零向量所在行列为 0"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidArgumentError(f"需要二维特征 (T, D)，实际维度 {x.ndim}")
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = x / safe[:, None]
    unit[norms == 0] = 0.0
    sim = unit @ unit.T
    # 消除舍入误差，保证对称与单位对角线
    sim = 0.5 * (sim + sim.T)
    diag = np.nonzero(norms > 0)[0]
    sim[diag, diag] = 1.0
    return np.clip(sim, -1.0, 1.0)


def mean_adjacent_similarity(x) -> float:
    """相邻 clip 的平均余弦相似度"""
    sim = cosine_similarity_matrix(x)
    if sim.shape[0] < 2:
        return 1.0
    return float(np.mean(np.diagonal(sim, offset=1)))


class EvaluationService:
    """评估服务：在一组固定的 tIoU 阈值上计算 mAP"""

    def __init__(self, thresholds: Optional[Sequence[float]] = None):
        self.thresholds = list(thresholds) if thresholds is not None else list(DEFAULT_THRESHOLDS)

    def evaluate(self, predictions: Sequence[ScoredSegment], gt: GroundTruth) -> EvalReport:
        report = mean_ap(predictions, gt, self.thresholds)
        logger.info(f"评估完成: average mAP={report.average_map:.4f}, 阈值 {self.thresholds}")
        return report

    @staticmethod
    def similarity(x) -> Tuple[np.ndarray, float]:
        """余弦相似度矩阵与相邻 clip 的平均相似度"""
        return cosine_similarity_matrix(x), mean_adjacent_similarity(x)
