import json

import numpy as np
import pytest

from bruteforce import max_relative_error, numeric_gradient
from detadapt.detector import (GradientSet, ModelParams, TrainingError,
                               detection_loss, forward, forward_arrays, giou,
                               load_params, save_params, sgd_step)
from detadapt.util import one_hot
from detadapt.world import BBox, DetectionSample


def random_sample(rng, num_proposals=5, feature_dim=6, span=8.0):
    boxes = []
    for _ in range(num_proposals):
        x, y = rng.uniform(0, span, 2)
        w, h = rng.uniform(1, 3, 2)
        boxes.append([x, y, x + w, y + h])
    return DetectionSample(0, np.array(boxes), rng.standard_normal((num_proposals, feature_dim)), [])


def random_params(rng, num_classes=3, feature_dim=6, scale=0.5, dropout=0.0):
    return ModelParams(
        scale * rng.standard_normal((num_classes + 1, feature_dim)),
        scale * rng.standard_normal(num_classes + 1),
        0.4 * scale * rng.standard_normal((4, feature_dim)),
        0.4 * scale * rng.standard_normal(4),
        dropout,
    )


def random_labels(rng, num_classes=3, count=2, span=8.0, soft=False):
    labels = []
    for _ in range(count):
        x, y = rng.uniform(0, span, 2)
        w, h = rng.uniform(1, 3, 2)
        vec = rng.dirichlet(np.ones(num_classes)) if soft else one_hot(int(rng.integers(num_classes)), num_classes)
        labels.append((BBox(x, y, x + w, y + h), vec))
    return labels


def test_zero_weights_give_uniform_scores():
    params = ModelParams(np.zeros((4, 6)), np.zeros(4), np.zeros((4, 6)), np.zeros(4))
    sample = random_sample(np.random.default_rng(0))
    for det in forward(params, sample):
        assert np.allclose(det.scores, 0.25)
        assert abs(det.scores.sum() - 1.0) < 1e-9


def test_forward_deterministic_without_dropout():
    rng = np.random.default_rng(1)
    params = random_params(rng)
    sample = random_sample(rng)
    a = forward(params, sample)
    b = forward(params, sample)
    for da, db in zip(a, b):
        assert np.array_equal(da.scores, db.scores)
        assert da.box == db.box


def test_zero_dropout_rate_ignores_seed():
    rng = np.random.default_rng(2)
    params = random_params(rng, dropout=0.0)
    sample = random_sample(rng)
    with_seed = forward(params, sample, dropout_seed=123)
    without = forward(params, sample)
    for da, db in zip(with_seed, without):
        assert np.array_equal(da.scores, db.scores)


def test_dropout_seed_reproducible_and_varied():
    rng = np.random.default_rng(3)
    params = random_params(rng, dropout=0.4)
    sample = random_sample(rng)
    a1 = forward_arrays(params, sample, dropout_seed=7)[0]
    a2 = forward_arrays(params, sample, dropout_seed=7)[0]
    b = forward_arrays(params, sample, dropout_seed=8)[0]
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)


def test_giou_hand_values():
    assert giou(BBox(0, 0, 1, 1), BBox(0, 0, 1, 1)) == pytest.approx(1.0, abs=1e-9)
    assert giou(BBox(0, 0, 1, 1), BBox(2, 2, 3, 3)) == pytest.approx(-7 / 9, abs=1e-9)
    assert giou(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)) == pytest.approx(1 / 7 - 2 / 9, abs=1e-9)


def random_box(rng, span=10.0):
    x, y = rng.uniform(0, span, 2)
    w, h = rng.uniform(0.5, 3, 2)
    return BBox(x, y, x + w, y + h)


def test_giou_range_on_random_boxes():
    rng = np.random.default_rng(4)
    for _ in range(200):
        value = giou(random_box(rng), random_box(rng))
        assert -1.0 < value <= 1.0 + 1e-12


def test_perfect_background_drives_ce_to_zero():
    # huge background logit for every proposal, no labels
    params = ModelParams(np.zeros((4, 6)), np.array([0.0, 0.0, 0.0, 50.0]),
                         np.zeros((4, 6)), np.zeros(4))
    sample = random_sample(np.random.default_rng(5))
    loss, grads = detection_loss(params, sample, [])
    assert loss < 1e-9
    assert grads.is_finite()


def test_zero_residual_box_terms():
    # regressor predicts no refinement and the label sits exactly on a proposal,
    # so the remaining loss is exactly the cross-entropy part
    rng = np.random.default_rng(6)
    params = random_params(rng)
    params.w_reg[:] = 0.0
    params.b_reg[:] = 0.0
    sample = random_sample(rng)
    box = BBox(*sample.proposal_boxes[2])
    labels = [(box, one_hot(1, 3))]
    loss, _ = detection_loss(params, sample, labels, background=None)
    _, log_scores, _, _ = forward_arrays(params, sample)
    expected_ce = -log_scores[2, 1]
    assert loss == pytest.approx(expected_ce, abs=1e-12)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(10):
        params = random_params(rng)
        sample = random_sample(rng)
        labels = random_labels(rng, soft=True)
        weights = rng.uniform(0.2, 2.0, len(labels))
        _, grads = detection_loss(params, sample, labels, weights)
        numeric = numeric_gradient(lambda p: detection_loss(p, sample, labels, weights)[0], params)
        assert max_relative_error(grads, numeric) < 1e-4


def test_loss_terms_nonnegative_contract():
    rng = np.random.default_rng(8)
    for _ in range(50):
        params = random_params(rng)
        sample = random_sample(rng)
        labels = random_labels(rng)
        loss, _ = detection_loss(params, sample, labels)
        assert loss >= 0.0  # CE and box terms are nonnegative; 1-GIoU lies in [0, 2)


def test_sgd_step_examples():
    params = ModelParams(np.array([[1.0]]), np.zeros(1), np.zeros((4, 1)), np.zeros(4))
    grads = GradientSet(np.array([[2.0]]), np.zeros(1), np.zeros((4, 1)), np.zeros(4))
    assert sgd_step(params, grads, 0.1).w_cls[0, 0] == pytest.approx(0.8)
    assert sgd_step(params, grads, 0.0).w_cls[0, 0] == pytest.approx(1.0)
    zero = GradientSet.zeros_like(params)
    assert sgd_step(params, zero, 0.5).w_cls[0, 0] == pytest.approx(1.0)


def test_sgd_rejects_nonfinite_grads():
    params = ModelParams(np.zeros((2, 2)), np.zeros(2), np.zeros((4, 2)), np.zeros(4))
    grads = GradientSet.zeros_like(params)
    grads.w_cls[0, 0] = np.inf
    with pytest.raises(TrainingError):
        sgd_step(params, grads, 0.1)


def test_small_step_rarely_increases_loss():
    rng = np.random.default_rng(9)
    violations = 0
    for _ in range(100):
        params = random_params(rng)
        sample = random_sample(rng)
        labels = random_labels(rng)
        before, grads = detection_loss(params, sample, labels)
        after, _ = detection_loss(sgd_step(params, grads, 1e-4), sample, labels)
        violations += after > before
    assert violations <= 1


def test_params_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(10)
    params = random_params(rng, dropout=0.25)
    path = tmp_path / "params.json"
    save_params(path, params)
    loaded = load_params(path)
    assert np.array_equal(params.w_cls, loaded.w_cls)
    assert np.array_equal(params.b_cls, loaded.b_cls)
    assert np.array_equal(params.w_reg, loaded.w_reg)
    assert np.array_equal(params.b_reg, loaded.b_reg)
    assert params.dropout_rate == loaded.dropout_rate
    # a second serialization is byte-identical
    assert json.dumps(params.to_dict()) == json.dumps(loaded.to_dict())


def test_feature_dim_mismatch_raises():
    rng = np.random.default_rng(11)
    params = random_params(rng, feature_dim=5)
    sample = random_sample(rng, feature_dim=6)
    with pytest.raises(ValueError):
        forward(params, sample)
