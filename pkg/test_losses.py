"""Tests for the weighted BCE, Dice, Focal and composite losses."""

import numpy as np
import pytest

from app.core.errors import ShapeError
from app.schemas.config import LossWeights
from app.services.gradcheck import run_gradcheck
from app.services.losses import (
    PROB_EPS,
    bce_weighted,
    composite_loss,
    dice_loss,
    focal_loss,
    positive_weight,
)


def _instance(seed: int = 0):
    rng = np.random.default_rng(seed)
    probs = rng.uniform(0.05, 0.95, size=(2, 1, 8, 8))
    target = (rng.random(probs.shape) < 0.25).astype(np.float64)
    return probs, target


def test_bce_half_probability_is_log_two():
    loss, _ = bce_weighted(np.full((1, 1, 2, 2), 0.5), np.ones((1, 1, 2, 2)))
    assert loss == pytest.approx(np.log(2.0))


def test_bce_positive_weight_scales_positive_term():
    probs, target = np.full((1, 1, 1, 2), 0.3), np.array([[[[1.0, 0.0]]]])
    plain, _ = bce_weighted(probs, target, 1.0)
    weighted, _ = bce_weighted(probs, target, 4.0)
    pos_term = -np.log(0.3) / 2
    assert weighted - plain == pytest.approx(3.0 * pos_term)


def test_perfect_prediction_has_near_zero_loss():
    target = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
    assert bce_weighted(target, target)[0] < 1e-6
    assert dice_loss(target, target)[0] < 1e-6
    assert focal_loss(target, target)[0] < 1e-6


def test_dice_disjoint_masks():
    probs = np.array([[[[1.0, 0.0]]]])
    target = np.array([[[[0.0, 1.0]]]])
    loss, _ = dice_loss(probs, target, smooth=1.0)
    assert loss == pytest.approx(1.0 - 1.0 / 3.0, abs=1e-6)


def test_focal_with_zero_gamma_is_alpha_weighted_bce():
    probs, target = _instance(1)
    focal, _ = focal_loss(probs, target, gamma=0.0, alpha=0.5)
    bce, _ = bce_weighted(probs, target, 1.0)
    assert focal == pytest.approx(0.5 * bce)


def test_focal_downweights_easy_examples():
    target = np.ones((1, 1, 1, 1))
    easy, _ = focal_loss(np.full_like(target, 0.9), target)
    hard, _ = focal_loss(np.full_like(target, 0.1), target)
    assert easy < hard / 100


def test_positive_weight():
    target = np.zeros((1, 1, 10, 10))
    assert positive_weight(target, cap=100.0) == 100.0
    target[0, 0, 0, :4] = 1.0
    assert positive_weight(target) == pytest.approx(96 / 4)
    target[0, 0, :6] = 1.0
    assert positive_weight(target) == 1.0
    sparse = np.zeros((1, 1, 100, 100))
    sparse[0, 0, 0, 0] = 1.0
    assert positive_weight(sparse, cap=50.0) == 50.0


def test_composite_is_weighted_sum():
    probs, target = _instance(2)
    weights = LossWeights()
    pw = positive_weight(target, weights.pos_weight_cap)
    expected = (
        0.4 * bce_weighted(probs, target, pw)[0]
        + 0.3 * dice_loss(probs, target)[0]
        + 0.3 * focal_loss(probs, target)[0]
    )
    assert composite_loss(probs, target, weights)[0] == pytest.approx(expected)


def test_losses_are_finite_and_nonnegative_at_the_clamp():
    probs = np.array([[[[0.0, 1.0, PROB_EPS, 0.5]]]])
    target = np.array([[[[1.0, 0.0, 0.0, 1.0]]]])
    for fn in (bce_weighted, dice_loss, focal_loss):
        loss, grad = fn(probs, target)
        assert np.isfinite(loss) and loss >= 0
        assert np.all(np.isfinite(grad))
        assert grad[0, 0, 0, 0] == 0.0
        assert grad[0, 0, 0, 1] == 0.0


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        bce_weighted(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))


def test_gradient_dtype_follows_probabilities():
    probs, target = _instance(3)
    _, grad = composite_loss(probs.astype(np.float32), target.astype(np.float32), LossWeights())
    assert grad.dtype == np.float32


def test_loss_gradients_match_finite_differences():
    report = run_gradcheck(components=["bce_weighted", "dice_loss", "focal_loss", "composite_loss"])
    assert report.passed, report.model_dump()
