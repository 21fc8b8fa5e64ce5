# tests/test_model.py
import numpy as np
import pytest

from models.run_config import AssignConfig, ModelConfig, TcmVariant
from numerics.tensor import SeqTensor
from services.dataset_service import LabeledVideo
from services.loss_service import sigmoid
from services.model_service import (FeaturePyramid, backbone_forward, count_macs, count_params, heads_forward,
                                    init_params, level_lengths, mac_breakdown, model_forward)
from services.training_service import compute_gradients
from tests.gradcheck import directional_check
from utils.errors import InvalidArgumentError

MODEL_TOL = 1e-5
# 深层 TCM 权重的梯度范数可低至 1e-8，误差尺度不低于此值
GRAD_FLOOR = 1e-5


def _config(variant=TcmVariant.MAXPOOL, kernel=3, **overrides):
    values = dict(input_dim=3, embed_dim=4, num_levels=3, num_classes=2, tcm_variant=variant, tcm_kernel=kernel)
    values.update(overrides)
    return ModelConfig(**values)


def test_init_is_deterministic(tiny_model_config):
    a = init_params(tiny_model_config, seed=7)
    b = init_params(tiny_model_config, seed=7)
    assert list(a) == list(b)
    assert all(np.array_equal(a[name], b[name]) for name in a)
    c = init_params(tiny_model_config, seed=8)
    assert not np.array_equal(a['proj.0.conv.w'], c['proj.0.conv.w'])


def test_forward_is_deterministic(tiny_model_config, rng):
    params = init_params(tiny_model_config, seed=0)
    x = rng.standard_normal((16, 3))
    first = model_forward(x, params, tiny_model_config)
    second = model_forward(x.copy(), params, tiny_model_config)
    for a, b in zip(first.levels, second.levels):
        assert np.array_equal(a.logits.data, b.logits.data)
        assert np.array_equal(a.offsets.data, b.offsets.data)


def test_classifier_bias_starts_at_prior(tiny_model_config):
    params = init_params(tiny_model_config, seed=0)
    np.testing.assert_allclose(sigmoid(params['cls_out.b']), 0.01, rtol=1e-12)


@pytest.mark.parametrize('variant', list(TcmVariant))
def test_pyramid_lengths(variant, rng):
    config = _config(variant)
    pyramid = backbone_forward(rng.standard_normal((16, 3)), init_params(config, 0), config)
    assert pyramid.lengths == [16, 8, 4]
    assert pyramid.strides == [1, 2, 4]


@pytest.mark.parametrize('variant', list(TcmVariant))
def test_pyramid_lengths_are_ceil_halving(variant):
    rng = np.random.default_rng(99)
    for _ in range(20):
        length = int(rng.integers(4, 41))
        kernel = int(rng.integers(1, 7))
        config = _config(variant, kernel)
        pyramid = backbone_forward(rng.standard_normal((length, 3)), init_params(config, 0), config)
        assert pyramid.lengths == level_lengths(length, 3)


def test_too_short_input_rejected(tiny_model_config, rng):
    params = init_params(tiny_model_config, 0)
    with pytest.raises(InvalidArgumentError):
        model_forward(rng.standard_normal((3, 3)), params, tiny_model_config)


def test_input_dim_mismatch_rejected(tiny_model_config, rng):
    params = init_params(tiny_model_config, 0)
    with pytest.raises(InvalidArgumentError):
        model_forward(rng.standard_normal((8, 5)), params, tiny_model_config)


def test_valid_length_out_of_range_rejected(tiny_model_config, rng):
    params = init_params(tiny_model_config, 0)
    with pytest.raises(InvalidArgumentError):
        model_forward(rng.standard_normal((8, 3)), params, tiny_model_config, valid_length=9)


def test_heads_shared_across_levels(tiny_model_config, rng):
    params = init_params(tiny_model_config, 0)
    z = SeqTensor(rng.standard_normal((6, 4)))
    out = heads_forward(FeaturePyramid([z, z], [6, 6]), params, tiny_model_config)
    np.testing.assert_array_equal(out.levels[0].logits.data, out.levels[1].logits.data)
    np.testing.assert_array_equal(out.levels[0].offsets.data, out.levels[1].offsets.data)
    assert [level.stride for level in out.levels] == [1, 2]


def test_head_output_shapes_and_nonnegative_offsets(tiny_model_config, rng):
    out = model_forward(rng.standard_normal((16, 3)), init_params(tiny_model_config, 3), tiny_model_config)
    assert [level.logits.shape for level in out.levels] == [(16, 2), (8, 2), (4, 2)]
    assert [level.offsets.shape for level in out.levels] == [(16, 2), (8, 2), (4, 2)]
    assert all((level.offsets.data >= 0).all() for level in out.levels)
    assert out.num_clips == 16


def test_parameter_free_variants_share_parameter_count():
    counts = {v: count_params(init_params(_config(v), 0)) for v in TcmVariant}
    assert counts[TcmVariant.MAXPOOL] == counts[TcmVariant.AVGPOOL] == counts[TcmVariant.SUBSAMPLE]
    assert counts[TcmVariant.CONV] > counts[TcmVariant.MAXPOOL]
    assert counts[TcmVariant.ATTENTION] > counts[TcmVariant.MAXPOOL]


def test_macs_ordering_at_long_sequence():
    macs = {v: count_macs(ModelConfig(tcm_variant=v), 2304) for v in TcmVariant}
    assert macs[TcmVariant.MAXPOOL] == macs[TcmVariant.SUBSAMPLE] == macs[TcmVariant.AVGPOOL]
    assert macs[TcmVariant.MAXPOOL] < macs[TcmVariant.CONV]
    assert macs[TcmVariant.MAXPOOL] < macs[TcmVariant.ATTENTION]
    assert mac_breakdown(ModelConfig(), 2304)['tcm'] == 0


def test_mac_count_rejects_short_length():
    with pytest.raises(InvalidArgumentError):
        count_macs(_config(), 3)


@pytest.mark.parametrize('variant', list(TcmVariant))
def test_full_model_gradient(variant, tiny_video):
    config = _config(variant)
    assign = AssignConfig()
    params = init_params(config, seed=5)
    _, grads = compute_gradients([tiny_video], params, config, assign)

    for name in params:
        def loss(value, name=name):
            trial = params.copy()
            trial.tensors[name] = value
            result, _ = compute_gradients([tiny_video], trial, config, assign)
            return result.value

        error = directional_check(loss, params[name].copy(), grads[name], directions=2, seed=11,
                                 floor=GRAD_FLOOR)
        assert error < MODEL_TOL, name


def test_batch_gradient_is_mean_of_video_gradients(tiny_model_config, tiny_video, rng):
    other = LabeledVideo('other', rng.standard_normal((8, 3)), list(tiny_video.instances[:1]))
    params = init_params(tiny_model_config, 2)
    batch_result, batch_grads = compute_gradients([tiny_video, other], params, tiny_model_config)
    a_result, a_grads = compute_gradients([tiny_video], params, tiny_model_config)
    b_result, b_grads = compute_gradients([other], params, tiny_model_config)
    assert batch_result.value == pytest.approx(0.5 * (a_result.value + b_result.value), rel=1e-12)
    for name in params:
        np.testing.assert_allclose(batch_grads[name], 0.5 * (a_grads[name] + b_grads[name]), atol=1e-12)
