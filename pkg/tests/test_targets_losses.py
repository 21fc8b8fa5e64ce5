# tests/test_targets_losses.py
import math

import numpy as np
import pytest

from models.records import ActionInstance
from models.run_config import AssignConfig, LossConfig
from numerics.tensor import SeqTensor
from services.loss_service import (diou_loss, focal_loss, loss_breakdown, segment_diou_loss, sigmoid,
                                   total_loss)
from services.model_service import HeadOutputs, LevelOutput
from services.target_service import assign_targets, validate_instances
from tests.gradcheck import numeric_grad, rel_error
from utils.errors import InvalidArgumentError


def inst(start, end, label=0):
    return ActionInstance(start=start, end=end, label=label)


def _outputs_from(logits_per_level, offsets_per_level, num_clips):
    levels = [
        LevelOutput(SeqTensor(logits), SeqTensor(offsets), 2 ** index, logits.shape[0])
        for index, (logits, offsets) in enumerate(zip(logits_per_level, offsets_per_level))
    ]
    return HeadOutputs(levels, num_clips)


# ---- target assignment ----

def test_center_sampling_single_level():
    assignment = assign_targets([inst(2.0, 6.0)], [8], AssignConfig(regression_ranges=[(0, 8)]))
    level = assignment.levels[0]
    assert list(np.nonzero(level.positive)[0]) == [3, 4, 5]
    np.testing.assert_array_equal(level.offsets[4], [2.0, 2.0])
    np.testing.assert_array_equal(level.offsets[3], [1.0, 3.0])
    assert list(level.labels[level.positive]) == [0, 0, 0]
    assert assignment.num_positive == 3


def test_shorter_instance_wins():
    instances = [inst(0.0, 8.0, 0), inst(3.0, 5.0, 1)]
    level = assign_targets(instances, [8], AssignConfig(regression_ranges=[(0, None)])).levels[0]
    assert list(np.nonzero(level.positive)[0]) == [3, 4, 5]
    assert level.labels[4] == 1
    np.testing.assert_array_equal(level.offsets[4], [1.0, 1.0])
    assert level.labels[3] == 0 and level.labels[5] == 0


def test_regression_ranges_route_long_instance_upward():
    assignment = assign_targets([inst(0.0, 16.0)], [16, 8, 4], AssignConfig())
    assert not assignment.levels[0].positive.any()
    assert not assignment.levels[1].positive.any()
    assert list(np.nonzero(assignment.levels[2].positive)[0]) == [1, 2, 3]


def test_default_ranges_partition_scales():
    ranges = AssignConfig().ranges_for(4)
    assert ranges == [(0.0, 4.0), (4.0, 8.0), (8.0, 16.0), (16.0, math.inf)]


def test_padding_positions_never_positive():
    level = assign_targets([inst(2.0, 6.0)], [8], AssignConfig(regression_ranges=[(0, 8)]),
                           valid_lengths=[4]).levels[0]
    assert list(np.nonzero(level.positive)[0]) == [3]
    assert not level.valid[4:].any()


def test_no_instances_all_background():
    assignment = assign_targets([], [8, 4], AssignConfig())
    assert assignment.num_positive == 0
    assert all((level.labels == -1).all() for level in assignment.levels)


def test_validate_instances_rejects_out_of_range():
    with pytest.raises(InvalidArgumentError):
        validate_instances([inst(2.0, 9.0)], 8)
    with pytest.raises(InvalidArgumentError):
        validate_instances([inst(2.0, 4.0, 3)], 8, num_classes=2)


# ---- focal loss ----

def test_focal_loss_at_zero_logit():
    assert focal_loss([0.0], 0) == pytest.approx(0.25 * 0.25 * math.log(2.0), rel=1e-12)
    assert focal_loss([0.0], 0) == pytest.approx(0.04332, abs=1e-5)


def test_focal_loss_reduces_to_bce():
    for x in (-2.0, 0.3, 1.3):
        expected = math.log1p(math.exp(-x))
        assert focal_loss([x], 0, alpha=None, gamma=0.0) == pytest.approx(expected, rel=1e-12)
        assert focal_loss([x], -1, alpha=None, gamma=0.0) == pytest.approx(math.log1p(math.exp(x)), rel=1e-12)


def test_focal_loss_perfect_predictions():
    assert focal_loss([30.0], 0) < 1e-12
    assert focal_loss([-30.0, -30.0], -1) < 1e-12


def test_focal_loss_monotone_in_logit():
    values = [focal_loss([x], 0) for x in np.linspace(-6, 6, 25)]
    assert all(a > b for a, b in zip(values, values[1:]))
    values = [focal_loss([x], -1) for x in np.linspace(-6, 6, 25)]
    assert all(a < b for a, b in zip(values, values[1:]))


def test_focal_loss_finite_at_extreme_logits():
    assert math.isfinite(focal_loss([-800.0], 0))
    assert math.isfinite(focal_loss([800.0], -1))


def test_sigmoid_is_stable():
    np.testing.assert_allclose(sigmoid(np.array([-1000.0, 0.0, 1000.0])), [0.0, 0.5, 1.0])


# ---- DIoU ----

def test_diou_identical_segments():
    assert diou_loss((2.0, 2.0), (2.0, 2.0), 4.0) == pytest.approx(0.0, abs=1e-15)


def test_diou_disjoint_segments():
    assert segment_diou_loss((0.0, 1.0), (2.0, 3.0)) == pytest.approx(1.0 + 4.0 / 9.0, rel=1e-12)
    assert segment_diou_loss((0.0, 1.0), (2.0, 3.0)) == pytest.approx(1.4444, abs=1e-4)


def test_diou_nested_same_center():
    assert diou_loss((1.0, 1.0), (2.0, 2.0), 2.0) == pytest.approx(0.5, rel=1e-12)


def test_diou_bounds_and_symmetry(rng):
    for _ in range(200):
        a = np.sort(rng.uniform(0, 10, 2)) + [0.0, 0.01]
        b = np.sort(rng.uniform(0, 10, 2)) + [0.0, 0.01]
        value = segment_diou_loss(a, b)
        assert 0.0 <= value < 2.0
        assert value == pytest.approx(segment_diou_loss(b, a), rel=1e-12)


def test_diou_rejects_nonpositive_target():
    with pytest.raises(InvalidArgumentError):
        diou_loss((1.0, 1.0), (0.0, 2.0), 3.0)


# ---- total loss ----

def _two_level_case(rng):
    instances = [inst(1.0, 7.0, 1), inst(2.0, 4.0, 0)]
    assignment = assign_targets(instances, [8, 4], AssignConfig())
    logits = [rng.standard_normal((8, 2)), rng.standard_normal((4, 2))]
    offsets = [rng.uniform(0.5, 3.0, (8, 2)), rng.uniform(0.5, 3.0, (4, 2))]
    return assignment, logits, offsets


def test_two_level_positive_layout(rng):
    assignment, _, _ = _two_level_case(rng)
    assert list(np.nonzero(assignment.levels[0].positive)[0]) == [3, 4]
    assert list(np.nonzero(assignment.levels[1].positive)[0]) == [1, 3]
    assert assignment.num_positive == 4


def test_total_loss_of_perfect_prediction():
    assignment = assign_targets([inst(1.0, 7.0, 1), inst(2.0, 4.0, 0)], [8, 4], AssignConfig())
    logits, offsets = [], []
    for target in assignment.levels:
        n = len(target.positive)
        level_logits = np.full((n, 2), -40.0)
        rows = np.nonzero(target.positive)[0]
        level_logits[rows, target.labels[rows]] = 40.0
        level_offsets = np.ones((n, 2))
        level_offsets[rows] = target.offsets[rows] / target.stride
        logits.append(level_logits)
        offsets.append(level_offsets)
    result = total_loss(_outputs_from(logits, offsets, 8), assignment)
    assert result.value < 1e-10
    assert result.num_positive == 4


def test_total_loss_without_positives():
    assignment = assign_targets([], [4], AssignConfig(regression_ranges=[(0, None)]))
    outputs = _outputs_from([np.zeros((4, 2))], [np.ones((4, 2))], 4)
    result = total_loss(outputs, assignment)
    assert result.num_positive == 0
    assert result.reg_loss == 0.0
    assert result.value == pytest.approx(8 * 0.75 * 0.25 * math.log(2.0), rel=1e-12)


def test_total_loss_gradients(rng):
    assignment, logits, offsets = _two_level_case(rng)
    config = LossConfig()
    outputs = _outputs_from(logits, offsets, 8)
    result = total_loss(outputs, assignment, config)

    def loss() -> float:
        return total_loss(_outputs_from(logits, offsets, 8), assignment, config).value

    for level, out in enumerate(outputs.levels):
        assert rel_error(result.seeds[out.logits], numeric_grad(loss, logits[level])) < 1e-6
        assert rel_error(result.seeds[out.offsets], numeric_grad(loss, offsets[level])) < 1e-6


def test_total_loss_batch_is_mean(rng):
    assignment, logits, offsets = _two_level_case(rng)
    first = _outputs_from(logits, offsets, 8)
    second = _outputs_from([-x for x in logits], [o + 1.0 for o in offsets], 8)
    batch = total_loss([first, second], [assignment, assignment])
    single = [total_loss(out, assignment) for out in (_outputs_from(logits, offsets, 8),
                                                     _outputs_from([-x for x in logits],
                                                                   [o + 1.0 for o in offsets], 8))]
    assert batch.value == pytest.approx(0.5 * (single[0].value + single[1].value), rel=1e-12)
    assert loss_breakdown(single)['loss'] == pytest.approx(batch.value, rel=1e-12)


def test_total_loss_level_mismatch(rng):
    assignment, logits, offsets = _two_level_case(rng)
    with pytest.raises(InvalidArgumentError):
        total_loss(_outputs_from(logits[:1], offsets[:1], 8), assignment)
