"""
Transform-domain perceptron blocks.

A block maps each channel to the Hadamard or DCT domain, scales every
coefficient by a learnable weight, soft-thresholds it with a learnable
nonnegative threshold, and returns to the spatial domain:

    y = inverse(S_T(W * forward(x)))

Weights and thresholds are full (C, N, N) maps shared across the batch.
"""

from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np
import numpy.typing as npt

from app.core.errors import ConfigError, ShapeError, StaleTraceError
from app.services.tensor_ops import Tensor, float_dtype
from app.services.transforms import HadamardPlan, dct2d, ht2d, idct2d, iht2d

TransformKind = Literal["ht", "dct"]


@dataclass
class PerceptronParams:
    """Scaling map W and threshold map T of one block."""

    weight: np.ndarray
    threshold: np.ndarray
    transform: TransformKind = "ht"

    def __post_init__(self) -> None:
        if self.weight.ndim != 3 or self.weight.shape[1] != self.weight.shape[2]:
            raise ShapeError(f"perceptron weight must be (C, N, N), got {self.weight.shape}")
        if self.threshold.shape != self.weight.shape:
            raise ShapeError(
                f"threshold shape {self.threshold.shape} != weight shape {self.weight.shape}"
            )
        if self.transform == "ht":
            HadamardPlan(self.weight.shape[1])
        elif self.transform != "dct":
            raise ShapeError(f"unknown transform {self.transform!r}")

    @classmethod
    def identity(
        cls, channels: int, size: int, transform: TransformKind, dtype: npt.DTypeLike = np.float32
    ) -> "PerceptronParams":
        """W = 1, T = 0: the block starts as an exact roundtrip."""
        return cls(
            weight=np.ones((channels, size, size), dtype=dtype),
            threshold=np.zeros((channels, size, size), dtype=dtype),
            transform=transform,
        )


# Aliases naming the two block flavours.
HTPerceptronParams = PerceptronParams
DCTPerceptronParams = PerceptronParams


@dataclass
class PerceptronWorkspace:
    """Intermediates kept between forward and backward (float64)."""

    x_hat: np.ndarray
    scaled: np.ndarray
    thresholded: np.ndarray
    transform: TransformKind
    dtype: np.dtype
    consumed: bool = False


def soft_threshold(e: Tensor | float, t: Tensor | float) -> Tensor:
    """sgn(e) (|e| - t) where |e| > t, else 0."""
    e = np.asarray(e)
    t = np.asarray(t)
    if np.any(t < 0):
        raise ConfigError(f"soft_threshold requires nonnegative thresholds, got min {float(t.min())}")
    return np.sign(e) * np.maximum(np.abs(e) - t, 0.0)


def _ops(transform: TransformKind) -> tuple[Callable, Callable, Callable, Callable]:
    """(forward, inverse, forward adjoint, inverse adjoint) for a transform."""
    if transform == "ht":
        # H is symmetric, so the two-sided product is self-adjoint.
        return ht2d, iht2d, ht2d, iht2d
    # D X D^T has adjoint D^T G D; D^T Z D has adjoint D G D^T.
    return dct2d, idct2d, idct2d, dct2d


def _check_input(x: np.ndarray, p: PerceptronParams) -> None:
    if x.ndim not in (3, 4) or x.shape[-3:] != p.weight.shape:
        raise ShapeError(f"perceptron input {x.shape} does not match parameter maps {p.weight.shape}")


def perceptron_forward(x: Tensor, p: PerceptronParams) -> tuple[Tensor, PerceptronWorkspace]:
    """Transform, scale, soft-threshold, inverse transform."""
    _check_input(x, p)
    forward, inverse, _, _ = _ops(p.transform)
    x_hat = forward(x.astype(np.float64))
    scaled = p.weight.astype(np.float64) * x_hat
    thresholded = soft_threshold(scaled, np.maximum(p.threshold.astype(np.float64), 0.0))
    y = inverse(thresholded)
    dtype = float_dtype(x)
    return y.astype(dtype), PerceptronWorkspace(x_hat, scaled, thresholded, p.transform, dtype)


def perceptron_backward(
    ws: PerceptronWorkspace, p: PerceptronParams, grad_y: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    """
    Reverse-mode gradients wrt x, W and T.

    dS/de = 1 and dS/dT = -sgn(e) where |e| > T, both 0 otherwise
    (including the kink |e| = T).
    """
    if ws.consumed:
        raise StaleTraceError("perceptron workspace was already used by a backward pass")
    if grad_y.shape != ws.x_hat.shape or ws.transform != p.transform:
        raise StaleTraceError(
            f"workspace of shape {ws.x_hat.shape} ({ws.transform}) does not match "
            f"grad_y {grad_y.shape} ({p.transform})"
        )
    ws.consumed = True
    _, _, forward_adj, inverse_adj = _ops(p.transform)
    batched = grad_y.ndim == 4

    grad_z = inverse_adj(grad_y.astype(np.float64))
    active = np.abs(ws.scaled) > np.maximum(p.threshold.astype(np.float64), 0.0)
    grad_e = grad_z * active
    grad_t = -np.sign(ws.scaled) * grad_e
    grad_w = grad_e * ws.x_hat
    if batched:
        grad_t = grad_t.sum(axis=0)
        grad_w = grad_w.sum(axis=0)
    grad_x = forward_adj(grad_e * p.weight.astype(np.float64))
    return (
        grad_x.astype(ws.dtype),
        grad_w.astype(p.weight.dtype),
        grad_t.astype(p.threshold.dtype),
    )


def ht_perceptron_forward(x: Tensor, p: PerceptronParams) -> tuple[Tensor, PerceptronWorkspace]:
    if p.transform != "ht":
        raise ShapeError("ht_perceptron_forward needs Hadamard parameters")
    return perceptron_forward(x, p)


def ht_perceptron_backward(
    ws: PerceptronWorkspace, p: PerceptronParams, grad_y: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    return perceptron_backward(ws, p, grad_y)


def dct_perceptron_forward(x: Tensor, p: PerceptronParams) -> tuple[Tensor, PerceptronWorkspace]:
    if p.transform != "dct":
        raise ShapeError("dct_perceptron_forward needs DCT parameters")
    return perceptron_forward(x, p)


def dct_perceptron_backward(
    ws: PerceptronWorkspace, p: PerceptronParams, grad_y: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    return perceptron_backward(ws, p, grad_y)


def project_thresholds(p: PerceptronParams) -> PerceptronParams:
    """Clamp thresholds at zero in place."""
    np.maximum(p.threshold, 0, out=p.threshold)
    return p
