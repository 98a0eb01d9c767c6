"""
Segmentation losses with gradients wrt predicted probabilities.

Every function returns (loss, grad) where grad has the shape of probs.
Probabilities are clamped to [PROB_EPS, 1 - PROB_EPS]; the clamp passes no
gradient outside that range.
"""

import numpy as np

from app.core.errors import ShapeError
from app.schemas.config import LossWeights
from app.services.tensor_ops import Tensor, float_dtype

PROB_EPS = 1e-7


def _prepare(probs: Tensor, target: Tensor) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Clamped float64 probabilities, float64 targets, and the clamp pass-through mask."""
    if probs.shape != target.shape:
        raise ShapeError(f"probs shape {probs.shape} != target shape {target.shape}")
    p = probs.astype(np.float64)
    inside = (p >= PROB_EPS) & (p <= 1.0 - PROB_EPS)
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS), target.astype(np.float64), inside


def positive_weight(target: Tensor, cap: float = 100.0) -> float:
    """#negative / #positive pixels of a batch, clamped to [1, cap]."""
    positives = int(np.count_nonzero(target > 0.5))
    negatives = int(target.size) - positives
    if positives == 0:
        return float(cap)
    return float(min(max(negatives / positives, 1.0), cap))


def bce_weighted(probs: Tensor, target: Tensor, pos_weight: float = 1.0) -> tuple[float, Tensor]:
    """mean(-(w y log p + (1 - y) log(1 - p)))."""
    p, y, inside = _prepare(probs, target)
    n = p.size
    loss = -(pos_weight * y * np.log(p) + (1.0 - y) * np.log1p(-p))
    grad = -(pos_weight * y / p - (1.0 - y) / (1.0 - p)) / n
    return float(loss.mean()), (grad * inside).astype(float_dtype(probs))


def dice_loss(probs: Tensor, target: Tensor, smooth: float = 1.0) -> tuple[float, Tensor]:
    """1 - (2 sum(p y) + s) / (sum(p) + sum(y) + s), soft."""
    p, y, inside = _prepare(probs, target)
    intersection = float((p * y).sum())
    denominator = float(p.sum() + y.sum()) + smooth
    numerator = 2.0 * intersection + smooth
    grad = -(2.0 * y * denominator - numerator) / denominator**2
    return 1.0 - numerator / denominator, (grad * inside).astype(float_dtype(probs))


def focal_loss(
    probs: Tensor, target: Tensor, gamma: float = 2.0, alpha: float = 0.25
) -> tuple[float, Tensor]:
    """mean(-a y (1 - p)^g log p - (1 - a)(1 - y) p^g log(1 - p))."""
    p, y, inside = _prepare(probs, target)
    n = p.size
    q = 1.0 - p
    log_p, log_q = np.log(p), np.log1p(-p)
    loss = -alpha * y * q**gamma * log_p - (1.0 - alpha) * (1.0 - y) * p**gamma * log_q

    if gamma == 0.0:
        d_pos = 1.0 / p
        d_neg = -1.0 / q
    else:
        d_pos = -gamma * q ** (gamma - 1.0) * log_p + q**gamma / p
        d_neg = gamma * p ** (gamma - 1.0) * log_q - p**gamma / q
    grad = (-alpha * y * d_pos - (1.0 - alpha) * (1.0 - y) * d_neg) / n
    return float(loss.mean()), (grad * inside).astype(float_dtype(probs))


def composite_loss(
    probs: Tensor, target: Tensor, weights: LossWeights, pos_weight: float | None = None
) -> tuple[float, Tensor]:
    """
    lambda_bce * BCE + lambda_dice * Dice + lambda_focal * Focal.

    pos_weight defaults to the per-batch positive weight of target.
    """
    if pos_weight is None:
        pos_weight = positive_weight(target, weights.pos_weight_cap)
    bce, g_bce = bce_weighted(probs, target, pos_weight)
    dice, g_dice = dice_loss(probs, target, weights.dice_smooth)
    focal, g_focal = focal_loss(probs, target, weights.focal_gamma, weights.focal_alpha)

    loss = weights.lambda_bce * bce + weights.lambda_dice * dice + weights.lambda_focal * focal
    grad = (
        weights.lambda_bce * g_bce.astype(np.float64)
        + weights.lambda_dice * g_dice.astype(np.float64)
        + weights.lambda_focal * g_focal.astype(np.float64)
    )
    return float(loss), grad.astype(float_dtype(probs))
