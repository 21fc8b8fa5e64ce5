# -*- coding: utf-8 -*-
"""
可微分基础算子
每个算子都是输入的纯函数；传入 tape 时记录反向规则，梯度累加到输入节点的 grad 上
"""

from typing import Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from numerics.tensor import DTYPE, GradTape, Node, SeqTensor
from utils.errors import InvalidArgumentError

Padding = Union[int, Tuple[int, int]]


def _split_pad(pad: Padding) -> Tuple[int, int]:
    if isinstance(pad, (tuple, list)):
        left, right = int(pad[0]), int(pad[1])
    else:
        left = right = int(pad)
    if left < 0 or right < 0:
        raise InvalidArgumentError(f"padding 不能为负: {pad}")
    return left, right


def _output_length(length: int, k: int, stride: int, left: int, right: int) -> int:
    if k < 1 or stride < 1:
        raise InvalidArgumentError(f"kernel={k}, stride={stride} 必须 >= 1")
    padded = length + left + right
    if padded < k:
        raise InvalidArgumentError(f"序列长度 {length} 加 padding 后 ({padded}) 小于 kernel {k}")
    return (padded - k) // stride + 1


def _check_windows_touch_input(length: int, k: int, stride: int, left: int, out_len: int) -> None:
    """窗口完全落在 padding 区域时报错"""
    starts = np.arange(out_len) * stride
    ends = starts + k - 1
    if np.any(ends < left) or np.any(starts > left + length - 1):
        raise InvalidArgumentError(
            f"存在完全落在 padding 中的池化窗口 (T={length}, k={k}, stride={stride}, pad_left={left})"
        )


def _record(tape: Optional[GradTape], fn) -> None:
    if tape is not None:
        tape.record(fn)


def conv1d(x: SeqTensor, w: Node, b: Node, stride: int = 1, pad: Padding = 0,
           tape: Optional[GradTape] = None) -> SeqTensor:
    """一维卷积（零填充）

    Args:
        x: 输入 (T, Cin)
        w: 卷积核 (Cout, Cin, k)
        b: 偏置 (Cout,)
        stride: 步长
        pad: 两侧 padding，或 (left, right)
        tape: 训练时的梯度磁带

    Returns:
        SeqTensor: (T', Cout)，T' = floor((T + pad_total - k) / stride) + 1
    """
    cout, cin, k = w.data.shape
    if x.channels != cin:
        raise InvalidArgumentError(f"conv1d 输入通道 {x.channels} 与卷积核输入通道 {cin} 不一致")
    if b.data.shape != (cout,):
        raise InvalidArgumentError(f"conv1d 偏置形状 {b.data.shape} 应为 ({cout},)")
    left, right = _split_pad(pad)
    t_out = _output_length(x.length, k, stride, left, right)

    xp = np.pad(x.data, ((left, right), (0, 0)))
    # (T', Cin, k)
    windows = sliding_window_view(xp, k, axis=0)[::stride][:t_out]
    cols = windows.reshape(t_out, cin * k)
    w_mat = w.data.reshape(cout, cin * k)
    out = SeqTensor(cols @ w_mat.T + b.data)

    def _backward():
        g = out.grad
        if g is None:
            return
        w.accumulate((g.T @ cols).reshape(cout, cin, k))
        b.accumulate(g.sum(axis=0))
        dcols = (g @ w_mat).reshape(t_out, cin, k)
        dxp = np.zeros_like(xp)
        span = stride * (t_out - 1) + 1
        for j in range(k):
            dxp[j:j + span:stride] += dcols[:, :, j]
        x.accumulate(dxp[left:left + x.length])

    _record(tape, _backward)
    return out


def _layer_norm_forward(data: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    mean = data.mean(axis=1, keepdims=True)
    var = data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (data - mean) * inv_std
    return gamma * x_hat + beta, x_hat, inv_std


def _layer_norm_backward(g: np.ndarray, x_hat: np.ndarray, inv_std: np.ndarray, gamma: np.ndarray):
    n = x_hat.shape[1]
    dx_hat = g * gamma
    dx = (inv_std / n) * (
        n * dx_hat
        - dx_hat.sum(axis=1, keepdims=True)
        - x_hat * (dx_hat * x_hat).sum(axis=1, keepdims=True)
    )
    return dx, (g * x_hat).sum(axis=0), g.sum(axis=0)


def layer_norm(x: SeqTensor, gamma: Node, beta: Node, eps: float = 1e-5,
               tape: Optional[GradTape] = None) -> SeqTensor:
    """沿通道维做 Layer Normalization"""
    if eps < 0:
        raise InvalidArgumentError(f"eps 不能为负: {eps}")
    if gamma.data.shape != (x.channels,) or beta.data.shape != (x.channels,):
        raise InvalidArgumentError(
            f"layer_norm 仿射参数形状应为 ({x.channels},)，实际 {gamma.data.shape}/{beta.data.shape}"
        )
    y, x_hat, inv_std = _layer_norm_forward(x.data, gamma.data, beta.data, eps)
    out = SeqTensor(y)

    def _backward():
        if out.grad is None:
            return
        dx, dgamma, dbeta = _layer_norm_backward(out.grad, x_hat, inv_std, gamma.data)
        x.accumulate(dx)
        gamma.accumulate(dgamma)
        beta.accumulate(dbeta)

    _record(tape, _backward)
    return out


def relu(x: SeqTensor, tape: Optional[GradTape] = None) -> SeqTensor:
    # x == 0 处的次梯度取 0
    active = x.data > 0
    out = SeqTensor(np.where(active, x.data, 0.0))

    def _backward():
        if out.grad is not None:
            x.accumulate(out.grad * active)

    _record(tape, _backward)
    return out


def maxpool1d(x: SeqTensor, k: int, stride: int, pad: Padding = 0,
              tape: Optional[GradTape] = None) -> SeqTensor:
    """一维最大池化，padding 视为 -inf；并列时梯度流向时间索引最小的位置"""
    left, right = _split_pad(pad)
    t_out = _output_length(x.length, k, stride, left, right)
    _check_windows_touch_input(x.length, k, stride, left, t_out)

    xp = np.pad(x.data, ((left, right), (0, 0)), constant_values=-np.inf)
    windows = sliding_window_view(xp, k, axis=0)[::stride][:t_out]
    # argmax 返回第一个最大值，即时间索引最小者
    winner = windows.argmax(axis=2)
    out = SeqTensor(np.take_along_axis(windows, winner[:, :, None], axis=2)[:, :, 0])
    source = np.arange(t_out)[:, None] * stride + winner - left

    def _backward():
        if out.grad is None:
            return
        dx = np.zeros_like(x.data)
        channel = np.broadcast_to(np.arange(x.channels), source.shape)
        np.add.at(dx, (source, channel), out.grad)
        x.accumulate(dx)

    _record(tape, _backward)
    return out


def avgpool1d(x: SeqTensor, k: int, stride: int, pad: Padding = 0,
              valid_length: Optional[int] = None,
              tape: Optional[GradTape] = None) -> SeqTensor:
    """一维平均池化，除数不计 padding（count_include_pad=False）

    Args:
        valid_length: 有效长度；其后的行视同 padding，不参与均值
    """
    left, right = _split_pad(pad)
    t_out = _output_length(x.length, k, stride, left, right)
    _check_windows_touch_input(x.length, k, stride, left, t_out)
    valid = x.length if valid_length is None else min(int(valid_length), x.length)

    mask = np.zeros(x.length + left + right, dtype=DTYPE)
    mask[left:left + valid] = 1.0
    xp = np.pad(x.data, ((left, right), (0, 0))) * mask[:, None]
    sums = sliding_window_view(xp, k, axis=0)[::stride][:t_out].sum(axis=2)
    counts = sliding_window_view(mask, k)[::stride][:t_out].sum(axis=1)
    # 完全落在有效长度之外的窗口输出 0（后续会被掩码）
    safe = np.where(counts > 0, counts, 1.0)
    out = SeqTensor(sums / safe[:, None])

    def _backward():
        if out.grad is None:
            return
        share = out.grad / safe[:, None]
        dxp = np.zeros_like(xp)
        span = stride * (t_out - 1) + 1
        for j in range(k):
            dxp[j:j + span:stride] += share
        dxp *= mask[:, None]
        x.accumulate(dxp[left:left + x.length])

    _record(tape, _backward)
    return out


def subsample(x: SeqTensor, stride: int, tape: Optional[GradTape] = None) -> SeqTensor:
    """保留索引 0, stride, 2*stride, ..."""
    if stride < 1:
        raise InvalidArgumentError(f"stride 必须 >= 1: {stride}")
    out = SeqTensor(x.data[::stride].copy())

    def _backward():
        if out.grad is None:
            return
        dx = np.zeros_like(x.data)
        dx[::stride] = out.grad
        x.accumulate(dx)

    _record(tape, _backward)
    return out


def mask_rows(x: SeqTensor, valid_length: Optional[int], tape: Optional[GradTape] = None) -> SeqTensor:
    """把 valid_length 之后的行置零（批内 padding 的有效性掩码）"""
    if valid_length is None or valid_length >= x.length:
        return x
    data = x.data.copy()
    data[valid_length:] = 0.0
    out = SeqTensor(data)

    def _backward():
        if out.grad is None:
            return
        g = out.grad.copy()
        g[valid_length:] = 0.0
        x.accumulate(g)

    _record(tape, _backward)
    return out


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def self_attention(x: SeqTensor, wq: Node, wk: Node, wv: Node, wo: Node,
                   query_stride: int = 1, gamma: Optional[Node] = None, beta: Optional[Node] = None,
                   eps: float = 1e-5, valid_length: Optional[int] = None,
                   tape: Optional[GradTape] = None) -> SeqTensor:
    """单头缩放点积注意力：跨步查询、全窗口键值、输出投影、残差与 LayerNorm

    Returns:
        SeqTensor: (ceil(T / query_stride), C)
    """
    c = x.channels
    for weight in (wq, wk, wv, wo):
        if weight.data.shape != (c, c):
            raise InvalidArgumentError(f"注意力权重形状应为 ({c}, {c})，实际 {weight.data.shape}")
    if query_stride < 1:
        raise InvalidArgumentError(f"query_stride 必须 >= 1: {query_stride}")
    if gamma is None:
        gamma = Node(np.ones(c))
    if beta is None:
        beta = Node(np.zeros(c))
    valid = x.length if valid_length is None else max(1, min(int(valid_length), x.length))

    scale = 1.0 / np.sqrt(c)
    xq = x.data[::query_stride]
    q = xq @ wq.data
    key = x.data[:valid] @ wk.data
    value = x.data[:valid] @ wv.data
    attn = softmax((q @ key.T) * scale)
    mixed = attn @ value
    residual = xq + mixed @ wo.data
    y, x_hat, inv_std = _layer_norm_forward(residual, gamma.data, beta.data, eps)
    out = SeqTensor(y)

    def _backward():
        if out.grad is None:
            return
        d_res, dgamma, dbeta = _layer_norm_backward(out.grad, x_hat, inv_std, gamma.data)
        gamma.accumulate(dgamma)
        beta.accumulate(dbeta)
        wo.accumulate(mixed.T @ d_res)
        d_mixed = d_res @ wo.data.T
        d_attn = d_mixed @ value.T
        d_value = attn.T @ d_mixed
        d_scores = attn * (d_attn - (d_attn * attn).sum(axis=1, keepdims=True)) * scale
        d_q = d_scores @ key
        d_key = d_scores.T @ q
        wq.accumulate(xq.T @ d_q)
        wk.accumulate(x.data[:valid].T @ d_key)
        wv.accumulate(x.data[:valid].T @ d_value)
        dx = np.zeros_like(x.data)
        dx[:valid] += d_key @ wk.data.T + d_value @ wv.data.T
        dx[::query_stride] += d_res + d_q @ wq.data.T
        x.accumulate(dx)

    _record(tape, _backward)
    return out

