# -*- coding: utf-8 -*-
"""
TemporalMaxer 模型服务
投影层 E1/E2 -> 多尺度特征金字塔（可替换的 TCM 模块）-> 共享权重的分类/回归头
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Tuple, Union

import numpy as np

from models.run_config import ModelConfig, TcmVariant
from numerics import ops
from numerics.tensor import GradTape, Node, Parameter, SeqTensor, as_seq
from utils.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

PROJECTION_KERNEL = 3
# focal loss 的先验概率初始化
PRIOR_PROBABILITY = 0.01


@dataclass
class ModelParams:
    """全部可学习参数，按名称有序存放"""
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> 'ModelParams':
        return ModelParams({name: value.copy() for name, value in self.tensors.items()})

    def bind(self) -> Dict[str, Parameter]:
        """为一次前向创建参数节点；同名参数在各层间共享同一节点，梯度自然累加"""
        return {name: Parameter(value, name) for name, value in self.tensors.items()}


BoundParams = Mapping[str, Node]
ParamsLike = Union[ModelParams, BoundParams]


@dataclass
class FeaturePyramid:
    """多尺度特征 Z^1..Z^L"""
    levels: List[SeqTensor]
    valid_lengths: List[int]

    @property
    def strides(self) -> List[int]:
        return [2 ** level for level in range(len(self.levels))]

    @property
    def lengths(self) -> List[int]:
        return [level.length for level in self.levels]


@dataclass
class LevelOutput:
    """单层头部输出；offsets 以该层步长为单位"""
    logits: SeqTensor
    offsets: SeqTensor
    stride: int
    valid_length: int


@dataclass
class HeadOutputs:
    levels: List[LevelOutput]
    # 输入序列的有效长度（clip 数）
    num_clips: int

    @property
    def level_lengths(self) -> List[int]:
        return [level.logits.length for level in self.levels]


def tcm_padding(kernel: int) -> Tuple[int, int]:
    """步长 2 的 TCM 填充：前 floor(k/2)，总计 k-1，保证输出长度 ceil(T/2)"""
    left = kernel // 2
    return left, kernel - 1 - left


def _bound(params: ParamsLike) -> BoundParams:
    return params.bind() if isinstance(params, ModelParams) else params


def _conv_init(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(cin * k)
    return rng.uniform(-bound, bound, size=(cout, cin, k))


def _add_block(tensors: Dict[str, np.ndarray], rng: np.random.Generator, prefix: str,
               cout: int, cin: int, k: int) -> None:
    # conv -> layer norm -> relu 的一组参数
    tensors[f'{prefix}.conv.w'] = _conv_init(rng, cout, cin, k)
    tensors[f'{prefix}.conv.b'] = np.zeros(cout)
    tensors[f'{prefix}.norm.gamma'] = np.ones(cout)
    tensors[f'{prefix}.norm.beta'] = np.zeros(cout)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """按固定顺序初始化参数，同一 (config, seed) 得到逐位相同的结果"""
    rng = np.random.default_rng(seed)
    d, hk = config.embed_dim, config.head_kernel
    tensors: Dict[str, np.ndarray] = {}

    _add_block(tensors, rng, 'proj.0', d, config.input_dim, PROJECTION_KERNEL)
    _add_block(tensors, rng, 'proj.1', d, d, PROJECTION_KERNEL)

    for level in range(1, config.num_levels):
        prefix = f'tcm.{level}'
        if config.tcm_variant == TcmVariant.CONV:
            _add_block(tensors, rng, prefix, d, d, config.tcm_kernel)
        elif config.tcm_variant == TcmVariant.ATTENTION:
            bound = 1.0 / math.sqrt(d)
            for name in ('wq', 'wk', 'wv', 'wo'):
                tensors[f'{prefix}.attn.{name}'] = rng.uniform(-bound, bound, size=(d, d))
            tensors[f'{prefix}.norm.gamma'] = np.ones(d)
            tensors[f'{prefix}.norm.beta'] = np.zeros(d)

    for branch in ('cls_head', 'reg_head'):
        _add_block(tensors, rng, f'{branch}.0', d, d, hk)
        _add_block(tensors, rng, f'{branch}.1', d, d, hk)

    tensors['cls_out.w'] = _conv_init(rng, config.num_classes, d, hk)
    tensors['cls_out.b'] = np.full(config.num_classes, -math.log((1 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY))
    tensors['reg_out.w'] = _conv_init(rng, 2, d, hk)
    tensors['reg_out.b'] = np.zeros(2)
    return ModelParams(tensors)


def _conv_block(x: SeqTensor, bound: BoundParams, prefix: str, kernel: int, eps: float,
                valid_length: Optional[int], tape: Optional[GradTape],
                stride: int = 1, pad=None) -> SeqTensor:
    if pad is None:
        pad = kernel // 2
    y = ops.conv1d(x, bound[f'{prefix}.conv.w'], bound[f'{prefix}.conv.b'], stride, pad, tape)
    y = ops.layer_norm(y, bound[f'{prefix}.norm.gamma'], bound[f'{prefix}.norm.beta'], eps, tape)
    y = ops.relu(y, tape)
    return ops.mask_rows(y, valid_length, tape)


def project_features(x, params: ParamsLike, config: Optional[ModelConfig] = None,
                     valid_length: Optional[int] = None, tape: Optional[GradTape] = None) -> SeqTensor:
    """X_p = E2(E1(X))，输出 T×D，作为 Z^1"""
    bound = _bound(params)
    x = as_seq(x)
    cin = bound['proj.0.conv.w'].data.shape[1]
    if x.channels != cin:
        raise InvalidArgumentError(f"输入特征维度 {x.channels} 与模型 input_dim {cin} 不一致")
    eps = config.layer_norm_eps if config is not None else 1e-5
    z = _conv_block(x, bound, 'proj.0', PROJECTION_KERNEL, eps, valid_length, tape)
    return _conv_block(z, bound, 'proj.1', PROJECTION_KERNEL, eps, valid_length, tape)


def _tcm(z: SeqTensor, bound: BoundParams, config: ModelConfig, level: int,
         valid_length: int, tape: Optional[GradTape]) -> SeqTensor:
    k = config.tcm_kernel
    variant = config.tcm_variant
    prefix = f'tcm.{level}'
    if variant == TcmVariant.MAXPOOL:
        return ops.maxpool1d(z, k, 2, tcm_padding(k), tape)
    if variant == TcmVariant.AVGPOOL:
        return ops.avgpool1d(z, k, 2, tcm_padding(k), valid_length=valid_length, tape=tape)
    if variant == TcmVariant.SUBSAMPLE:
        return ops.subsample(z, 2, tape)
    if variant == TcmVariant.CONV:
        return _conv_block(z, bound, prefix, k, config.layer_norm_eps, None, tape,
                           stride=2, pad=tcm_padding(k))
    return ops.self_attention(
        z, bound[f'{prefix}.attn.wq'], bound[f'{prefix}.attn.wk'],
        bound[f'{prefix}.attn.wv'], bound[f'{prefix}.attn.wo'],
        query_stride=2, gamma=bound[f'{prefix}.norm.gamma'], beta=bound[f'{prefix}.norm.beta'],
        eps=config.layer_norm_eps, valid_length=valid_length, tape=tape,
    )


def build_pyramid(z1: SeqTensor, params: ParamsLike, config: ModelConfig,
                  valid_length: Optional[int] = None, tape: Optional[GradTape] = None) -> FeaturePyramid:
    """Z^l = TCM(Z^(l-1))，l = 2..L，各层长度 ceil(T / 2^(l-1))"""
    bound = _bound(params)
    if z1.channels != config.embed_dim:
        raise InvalidArgumentError(f"Z^1 通道数 {z1.channels} 与 embed_dim {config.embed_dim} 不一致")
    min_length = 2 ** (config.num_levels - 1)
    if z1.length < min_length:
        raise InvalidArgumentError(
            f"输入长度 {z1.length} 不足以构建 {config.num_levels} 层金字塔（至少需要 {min_length}）"
        )
    valid = z1.length if valid_length is None else valid_length
    levels, valid_lengths = [z1], [valid]
    z = z1
    for level in range(1, config.num_levels):
        z = _tcm(z, bound, config, level, valid, tape)
        valid = -(-valid // 2)
        z = ops.mask_rows(z, valid, tape)
        levels.append(z)
        valid_lengths.append(valid)
    return FeaturePyramid(levels, valid_lengths)


def heads_forward(pyramid: FeaturePyramid, params: ParamsLike, config: Optional[ModelConfig] = None,
                  num_clips: Optional[int] = None, tape: Optional[GradTape] = None) -> HeadOutputs:
    """C_l = F_c(E4(E3(Z^l)))，O_l = ReLU(F_o(E6(E5(Z^l))))，各层共享同一组权重"""
    bound = _bound(params)
    hk = bound['cls_out.w'].data.shape[2]
    eps = config.layer_norm_eps if config is not None else 1e-5
    outputs = []
    for z, stride, valid in zip(pyramid.levels, pyramid.strides, pyramid.valid_lengths):
        c = _conv_block(z, bound, 'cls_head.0', hk, eps, valid, tape)
        c = _conv_block(c, bound, 'cls_head.1', hk, eps, valid, tape)
        logits = ops.conv1d(c, bound['cls_out.w'], bound['cls_out.b'], 1, hk // 2, tape)

        o = _conv_block(z, bound, 'reg_head.0', hk, eps, valid, tape)
        o = _conv_block(o, bound, 'reg_head.1', hk, eps, valid, tape)
        o = ops.conv1d(o, bound['reg_out.w'], bound['reg_out.b'], 1, hk // 2, tape)
        offsets = ops.relu(o, tape)
        outputs.append(LevelOutput(logits, offsets, stride, valid))
    if num_clips is None:
        num_clips = pyramid.valid_lengths[0]
    return HeadOutputs(outputs, num_clips)


def backbone_forward(x, params: ParamsLike, config: ModelConfig, valid_length: Optional[int] = None,
                     tape: Optional[GradTape] = None) -> FeaturePyramid:
    """编码器 e：投影层 + 金字塔"""
    bound = _bound(params)
    z1 = project_features(x, bound, config, valid_length, tape)
    return build_pyramid(z1, bound, config, valid_length, tape)


def model_forward(x, params: ParamsLike, config: ModelConfig, valid_length: Optional[int] = None,
                  tape: Optional[GradTape] = None) -> HeadOutputs:
    """f = e ∘ d；训练时传入 tape 与已绑定的参数节点"""
    bound = _bound(params)
    x = as_seq(x)
    valid = x.length if valid_length is None else int(valid_length)
    if not 1 <= valid <= x.length:
        raise InvalidArgumentError(f"valid_length {valid} 超出序列长度 {x.length}")
    pyramid = backbone_forward(x, bound, config, valid, tape)
    return heads_forward(pyramid, bound, config, valid, tape)


def count_params(params: ModelParams) -> int:
    """可学习标量总数"""
    return int(sum(value.size for value in params.tensors.values()))


def level_lengths(length: int, num_levels: int) -> List[int]:
    return [-(-length // (2 ** level)) for level in range(num_levels)]


def mac_breakdown(config: ModelConfig, length: int) -> Dict[str, int]:
    """一次前向的乘加次数，按投影/TCM/头部拆分；池化与下采样记 0"""
    if length < 2 ** (config.num_levels - 1):
        raise InvalidArgumentError(f"长度 {length} 小于 2^(L-1) = {2 ** (config.num_levels - 1)}")
    d, hk, k = config.embed_dim, config.head_kernel, config.tcm_kernel
    lengths = level_lengths(length, config.num_levels)

    projection = length * d * config.input_dim * PROJECTION_KERNEL + length * d * d * PROJECTION_KERNEL

    tcm = 0
    for prev_len, cur_len in zip(lengths[:-1], lengths[1:]):
        if config.tcm_variant == TcmVariant.CONV:
            tcm += cur_len * d * d * k
        elif config.tcm_variant == TcmVariant.ATTENTION:
            # Q/O 投影只在跨步查询上，K/V 投影覆盖全部位置；打分与加权各 Tq*T*C
            tcm += 2 * cur_len * d * d + 2 * prev_len * d * d + 2 * cur_len * prev_len * d

    heads = 0
    for cur_len in lengths:
        heads += 4 * cur_len * d * d * hk
        heads += cur_len * config.num_classes * d * hk
        heads += cur_len * 2 * d * hk

    return {'projection': projection, 'tcm': tcm, 'heads': heads,
            'total': projection + tcm + heads}


def count_macs(config: ModelConfig, length: int) -> int:
    return mac_breakdown(config, length)['total']
