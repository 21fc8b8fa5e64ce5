# -*- coding: utf-8 -*-
"""
流水线处理器
synth -> train -> infer -> eval 四个子命令的实现；返回写到 stdout 的摘要文本
"""

import logging
from pathlib import Path
from typing import Optional, Sequence

from models.run_config import RunConfig
from services import storage_service
from services.dataset_service import (LabeledVideo, attach_annotations, generate_synthetic_dataset,
                                      to_annotation_set)
from services.evaluation_service import EvaluationService
from services.inference_service import InferenceService
from services.training_service import TrainingService, loss_log_rows
from utils.errors import ConfigError, InvalidArgumentError
from utils.metrics import track_performance

logger = logging.getLogger(__name__)

ANNOTATIONS_FILE = 'annotations.json'
FEATURES_DIR = 'features'
CHECKPOINT_FILE = 'checkpoint.tmxc'
LOSS_LOG_FILE = 'loss_log.csv'
PREDICTIONS_FILE = 'predictions.json'
REPORT_FILE = 'eval_report.json'


class PipelineHandler:
    """处理数据生成、训练、推理与评估的专用处理器"""

    def __init__(self, run_config: RunConfig, out_dir: str):
        self.run_config = run_config
        self.out_dir = Path(out_dir)
        self.training_service = TrainingService(run_config)

    @track_performance('synth_command')
    def synth(self) -> str:
        """生成合成特征文件与标注"""
        videos = generate_synthetic_dataset(self.run_config.synth)
        storage_service.write_feature_dir(self.out_dir / FEATURES_DIR, {v.video_id: v.features for v in videos})
        annotations = to_annotation_set(videos, num_classes=self.run_config.synth.num_classes)
        storage_service.write_annotations(self.out_dir / ANNOTATIONS_FILE, annotations)
        total = sum(len(v.instances) for v in videos)
        return f"synth: {len(videos)} videos, {total} instances -> {self.out_dir}"

    @track_performance('train_command')
    def train(self, features_dir: str, annotations_path: str) -> str:
        """在特征 + 标注上训练，写出 EMA 检查点与损失日志"""
        model_config = self.run_config.model
        annotations = storage_service.parse_annotations(annotations_path)
        if len(annotations.classes) > model_config.num_classes:
            raise ConfigError(
                f"标注有 {len(annotations.classes)} 个类别，但 model.num_classes = {model_config.num_classes}"
            )
        videos = attach_annotations(storage_service.read_feature_dir(features_dir), annotations)
        if not videos:
            raise InvalidArgumentError("标注中没有视频")

        result = self.training_service.fit(videos)
        storage_service.write_checkpoint(self.out_dir / CHECKPOINT_FILE, self.run_config, result.params)
        storage_service.write_loss_log(self.out_dir / LOSS_LOG_FILE, loss_log_rows(result))
        if result.loss_history:
            summary = f"initial loss {result.loss_history[0]:.6f}, final loss {result.loss_history[-1]:.6f}"
        else:
            summary = "no steps"
        return f"train: {len(result.loss_history)} steps, {summary} -> {self.out_dir / CHECKPOINT_FILE}"

    @track_performance('infer_command')
    def infer(self, checkpoint_path: str, features_dir: str) -> str:
        """用检查点中的配置与 EMA 参数推理；推理参数取当前运行配置"""
        saved_config, params = storage_service.read_checkpoint(checkpoint_path)
        features = storage_service.read_feature_dir(features_dir)
        videos = [LabeledVideo(video_id, x) for video_id, x in features.items()]
        segments = InferenceService(saved_config.model, self.run_config.inference).predict(videos, params)
        storage_service.write_predictions(self.out_dir / PREDICTIONS_FILE, segments)
        return f"infer: {len(videos)} videos, {len(segments)} segments -> {self.out_dir / PREDICTIONS_FILE}"

    @track_performance('eval_command')
    def evaluate(self, predictions_path: str, annotations_path: str,
                 thresholds: Optional[Sequence[float]] = None) -> str:
        """tIoU-mAP 评估；输出每个阈值的 mAP 与平均值"""
        predictions = storage_service.read_predictions(predictions_path)
        annotations = storage_service.parse_annotations(annotations_path)
        thresholds = list(thresholds) if thresholds else list(self.run_config.eval.tiou_thresholds)
        report = EvaluationService(thresholds).evaluate(predictions, annotations)
        storage_service.write_report(self.out_dir / REPORT_FILE, report)

        lines = [f"mAP@{t:g}: {value:.4f}" for t, value in zip(report.tiou_thresholds, report.map_per_threshold)]
        lines.append(f"average mAP {report.average_map:.4f}")
        return '\n'.join(lines)
