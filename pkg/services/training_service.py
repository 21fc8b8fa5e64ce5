# -*- coding: utf-8 -*-
"""
训练服务
固定步数循环：前向 -> total_loss -> 反向 -> 梯度裁剪 -> AdamW -> EMA；评估使用 EMA 权重
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from models.run_config import AssignConfig, LossConfig, ModelConfig, RunConfig, TrainConfig
from numerics.tensor import GradTape, SeqTensor
from services.dataset_service import LabeledVideo
from services.loss_service import LossResult, total_loss
from services.model_service import ModelParams, init_params, model_forward
from services.target_service import assign_targets, validate_instances
from utils.errors import InvalidArgumentError, NonFiniteGradientError, TrainingDivergedError

logger = logging.getLogger(__name__)

Grads = Dict[str, np.ndarray]


@dataclass
class AdamState:
    """AdamW 的一阶/二阶矩估计与步数"""
    step: int = 0
    m: Grads = field(default_factory=dict)
    v: Grads = field(default_factory=dict)


@dataclass
class TrainResult:
    params: ModelParams
    raw_params: ModelParams
    loss_history: List[float]
    grad_norms: List[float]


def adamw_step(params: ModelParams, grads: Grads, state: AdamState,
               config: TrainConfig) -> Tuple[ModelParams, AdamState]:
    """一次解耦权重衰减的 Adam 更新（带偏差修正）

    Raises:
        NonFiniteGradientError: 某个参数组的梯度含 NaN/Inf
    """
    for name in params:
        if name in grads and not np.isfinite(grads[name]).all():
            raise NonFiniteGradientError(name)

    beta1, beta2 = config.betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step

    updated = {}
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(value)
        m = beta1 * state.m.get(name, np.zeros_like(value)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(value)) + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / correction1
        v_hat = v / correction2
        decayed = value - config.lr * config.weight_decay * value
        updated[name] = decayed - config.lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return ModelParams(updated), state


def global_norm(grads: Grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(grads: Grads, max_norm: float) -> Grads:
    """按全局 L2 范数裁剪；范数不超过 max_norm 时原样返回"""
    if max_norm <= 0:
        raise InvalidArgumentError(f"max_norm 必须 > 0: {max_norm}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}


def ema_update(ema_params: ModelParams, params: ModelParams, decay: float) -> ModelParams:
    """ema <- decay * ema + (1 - decay) * params"""
    if not 0.0 <= decay < 1.0:
        raise InvalidArgumentError(f"ema decay 必须位于 [0, 1): {decay}")
    return ModelParams({
        name: decay * ema_params[name] + (1.0 - decay) * value
        for name, value in params.items()
    })


def pad_batch(videos: Sequence[LabeledVideo], pad_length: Optional[int] = None) -> Tuple[List[np.ndarray], List[int]]:
    """把批内视频用 0 填充到同一长度，返回填充后的特征与各自有效长度"""
    longest = max(v.num_clips for v in videos)
    target = longest if pad_length is None else pad_length
    if target < longest:
        raise InvalidArgumentError(f"pad_length {target} 小于批内最长视频 {longest}")
    padded = []
    for v in videos:
        x = np.zeros((target, v.features.shape[1]), dtype=np.float64)
        x[:v.num_clips] = v.features
        padded.append(x)
    return padded, [v.num_clips for v in videos]


def compute_gradients(videos: Sequence[LabeledVideo], params: ModelParams, model_config: ModelConfig,
                      assign_config: Optional[AssignConfig] = None, loss_config: Optional[LossConfig] = None,
                      pad_length: Optional[int] = None) -> Tuple[LossResult, Grads]:
    """一个批次的损失与对全部参数的梯度

    批内共用一条磁带和一组参数节点，梯度按固定顺序累加
    """
    assign_config = assign_config or AssignConfig()
    features, valid_lengths = pad_batch(videos, pad_length)
    bound = params.bind()
    tape = GradTape()

    outputs, assignments = [], []
    for video, x, valid in zip(videos, features, valid_lengths):
        validate_instances(video.instances, video.num_clips, model_config.num_classes)
        out = model_forward(SeqTensor(x), bound, model_config, valid_length=valid, tape=tape)
        outputs.append(out)
        assignments.append(assign_targets(
            video.instances, out.level_lengths, assign_config,
            valid_lengths=[level.valid_length for level in out.levels],
        ))

    result = total_loss(outputs, assignments, loss_config)
    tape.backward(result.seeds)
    grads = {
        name: node.grad if node.grad is not None else np.zeros_like(node.data)
        for name, node in bound.items()
    }
    return result, grads


def _batches(num_videos: int, batch_size: int, rng: np.random.Generator):
    size = min(batch_size, num_videos)
    order = rng.permutation(num_videos)
    cursor = 0
    while True:
        if cursor + size > num_videos:
            order = rng.permutation(num_videos)
            cursor = 0
        # 批内按下标排序，保证同一组视频总以同一顺序求和
        yield sorted(int(i) for i in order[cursor:cursor + size])
        cursor += size


def train(dataset: Sequence[LabeledVideo], model_config: ModelConfig, train_config: TrainConfig,
          assign_config: Optional[AssignConfig] = None, loss_config: Optional[LossConfig] = None,
          init: Optional[ModelParams] = None,
          on_step: Optional[Callable[[int, float, float], None]] = None) -> TrainResult:
    """训练模型，返回 EMA 参数与逐步损失

    Args:
        dataset: 训练视频
        model_config: 模型结构
        train_config: 优化器与循环设置
        assign_config: 标签分配参数
        loss_config: 损失参数
        init: 初始参数；默认用 train_config.seed 初始化
        on_step: 每步回调 (step, loss, grad_norm)

    Raises:
        TrainingDivergedError: 损失或参数出现非有限值
    """
    if not dataset:
        raise InvalidArgumentError("训练集为空")
    params = init.copy() if init is not None else init_params(model_config, train_config.seed)
    ema = params.copy()
    state = AdamState()
    rng = np.random.default_rng(train_config.seed)
    batches = _batches(len(dataset), train_config.batch_size, rng)

    logger.info(
        f"开始训练: variant={model_config.tcm_variant.value}, k={model_config.tcm_kernel}, "
        f"{len(dataset)} 段视频, {train_config.steps} 步, lr={train_config.lr}"
    )
    history: List[float] = []
    norms: List[float] = []
    for step in range(train_config.steps):
        batch = [dataset[i] for i in next(batches)]
        result, grads = compute_gradients(batch, params, model_config, assign_config, loss_config,
                                          train_config.pad_length)
        if not math.isfinite(result.value):
            logger.error(f"第 {step} 步损失非有限值: {result.value}")
            raise TrainingDivergedError(step, result.value)

        norm = global_norm(grads)
        grads = clip_grad_norm(grads, train_config.grad_clip_norm)
        params, state = adamw_step(params, grads, state, train_config)
        if not all(np.isfinite(value).all() for value in params.tensors.values()):
            raise TrainingDivergedError(step, result.value)
        ema = ema_update(ema, params, train_config.ema_decay)

        history.append(result.value)
        norms.append(norm)
        if on_step is not None:
            on_step(step, result.value, norm)
        if (step + 1) % train_config.log_every == 0 or step == 0:
            logger.info(
                f"step {step + 1}/{train_config.steps} loss={result.value:.6f} "
                f"(cls={result.cls_loss:.6f}, reg={result.reg_loss:.6f}, T+={result.num_positive}) "
                f"grad_norm={norm:.4f}"
            )

    return TrainResult(ema, params, history, norms)


def loss_log_rows(result: TrainResult) -> List[Tuple[int, float, float]]:
    return [(step, loss, norm) for step, (loss, norm) in enumerate(zip(result.loss_history, result.grad_norms))]


class TrainingService:
    """训练服务：模型结构、优化器、标签分配与损失参数都取自同一份运行配置"""

    def __init__(self, run_config: RunConfig):
        self.run_config = run_config

    def fit(self, videos: Sequence[LabeledVideo], seed: Optional[int] = None,
            model_config: Optional[ModelConfig] = None) -> TrainResult:
        """训练给定视频；seed / model_config 为空时取运行配置中的值"""
        train_config = self.run_config.train
        if seed is not None:
            train_config = train_config.model_copy(update={'seed': seed})
        return train(videos, model_config or self.run_config.model, train_config,
                     self.run_config.assign, self.run_config.loss)