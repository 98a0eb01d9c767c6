"""
Dense tensor kernels with analytic backward passes.

Tensors are numpy arrays laid out as (B, C, H, W); rank-3 (C, H, W) inputs
are accepted wherever a batch axis is optional. Storage follows the input
dtype (float32 in training, float64 in gradient checks) while every
reduction accumulates in float64. All kernels are deterministic: loops and
reductions run in a fixed order.
"""

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Literal

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from app.core.errors import ConfigError, ShapeError

Tensor = npt.NDArray[np.floating]
Mode = Literal["train", "eval"]


def float_dtype(*arrays: np.ndarray) -> np.dtype:
    """Floating result dtype of the operands (float64 for integer inputs)."""
    dtype = np.result_type(*(np.asarray(a).dtype for a in arrays))
    return dtype if np.issubdtype(dtype, np.floating) else np.dtype(np.float64)


def _batched(x: np.ndarray, name: str = "x") -> tuple[np.ndarray, bool]:
    """View x as (B, C, H, W); report whether a batch axis was added."""
    if x.ndim == 4:
        return x, False
    if x.ndim == 3:
        return x[None], True
    raise ShapeError(f"{name} must have rank 3 or 4, got shape {x.shape}")


def _unbatch(x: np.ndarray, squeeze: bool) -> np.ndarray:
    return x[0] if squeeze else x


def _per_channel(v: np.ndarray) -> np.ndarray:
    return v[None, :, None, None]


@dataclass
class ConvParams:
    """
    Convolution parameters.

    For conv2d the kernel is (out_ch, in_ch, k, k). The transposed
    convolution reads the same layout as (in_ch, out_ch, k, k), so one
    array serves a strided conv and its adjoint.
    """

    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        if self.kernel.ndim != 4 or self.kernel.shape[2] != self.kernel.shape[3]:
            raise ShapeError(f"kernel must be (a, b, k, k), got {self.kernel.shape}")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding < 0:
            raise ConfigError(f"padding must be nonnegative, got {self.padding}")

    @property
    def k(self) -> int:
        return self.kernel.shape[2]


def _output_extent(n: int, k: int, stride: int, padding: int, axis: str) -> int:
    extent = (n + 2 * padding - k) // stride + 1
    if n + 2 * padding < k or extent < 1:
        raise ShapeError(
            f"{axis} extent {n} with k={k}, stride={stride}, padding={padding} gives no output"
        )
    return extent


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(B, C, ho, wo, k, k) view of the k x k patches of a padded input."""
    view = sliding_window_view(xp, (k, k), axis=(2, 3))
    return view[:, :, ::stride, ::stride][:, :, :ho, :wo]


def _col2im(target: np.ndarray, cols: np.ndarray, stride: int) -> None:
    """Scatter-add (B, h, w, C, k, k) patch values into target (B, C, H', W')."""
    _, h, w, _, k, _ = cols.shape
    for i in range(k):
        for j in range(k):
            target[:, :, i : i + stride * h : stride, j : j + stride * w : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)


def _check_bias(p: ConvParams, channels: int) -> None:
    if p.bias.shape != (channels,):
        raise ShapeError(f"bias must have shape ({channels},), got {p.bias.shape}")


def conv2d_forward(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation of x with p.kernel plus bias."""
    x4, squeeze = _batched(x)
    out_ch, in_ch, k, _ = p.kernel.shape
    if x4.shape[1] != in_ch:
        raise ShapeError(f"input channels {x4.shape[1]} != kernel in_ch {in_ch}")
    _check_bias(p, out_ch)
    ho = _output_extent(x4.shape[2], k, p.stride, p.padding, "height")
    wo = _output_extent(x4.shape[3], k, p.stride, p.padding, "width")
    dtype = float_dtype(x4, p.kernel)

    cols = _windows(_pad(x4.astype(np.float64), p.padding), k, p.stride, ho, wo)
    out = np.tensordot(cols, p.kernel.astype(np.float64), axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + _per_channel(p.bias.astype(np.float64))
    return _unbatch(out.astype(dtype), squeeze)


def conv2d_backward(
    x: Tensor, p: ConvParams, grad_out: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients of sum(grad_out * conv2d_forward(x, p)) wrt x, kernel, bias."""
    x4, squeeze = _batched(x)
    g4, _ = _batched(grad_out, "grad_out")
    out_ch, in_ch, k, _ = p.kernel.shape
    if x4.shape[1] != in_ch:
        raise ShapeError(f"input channels {x4.shape[1]} != kernel in_ch {in_ch}")
    ho = _output_extent(x4.shape[2], k, p.stride, p.padding, "height")
    wo = _output_extent(x4.shape[3], k, p.stride, p.padding, "width")
    expected = (x4.shape[0], out_ch, ho, wo)
    if g4.shape != expected:
        raise ShapeError(f"grad_out shape {g4.shape} != conv output shape {expected}")
    dtype = float_dtype(x4, p.kernel)

    g = g4.astype(np.float64)
    xp = _pad(x4.astype(np.float64), p.padding)
    cols = _windows(xp, k, p.stride, ho, wo)
    grad_bias = g.sum(axis=(0, 2, 3))
    grad_kernel = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))

    grad_cols = np.tensordot(g, p.kernel.astype(np.float64), axes=([1], [0]))
    grad_xp = np.zeros(xp.shape, dtype=np.float64)
    _col2im(grad_xp, grad_cols, p.stride)
    h, w = x4.shape[2], x4.shape[3]
    grad_x = grad_xp[:, :, p.padding : p.padding + h, p.padding : p.padding + w]
    return (
        _unbatch(grad_x.astype(dtype), squeeze),
        grad_kernel.astype(dtype),
        grad_bias.astype(dtype),
    )


def transposed_output_extent(n: int, k: int, stride: int, padding: int) -> int:
    """Spatial extent produced by a transposed convolution."""
    extent = (n - 1) * stride + k - 2 * padding
    if extent < 1:
        raise ShapeError(f"transposed conv of extent {n} (k={k}, stride={stride}) is empty")
    return extent


def transposed_conv2d_forward(x: Tensor, p: ConvParams) -> Tensor:
    """Transposed convolution, the adjoint of conv2d with the same kernel array."""
    x4, squeeze = _batched(x)
    in_ch, out_ch, k, _ = p.kernel.shape
    if x4.shape[1] != in_ch:
        raise ShapeError(f"input channels {x4.shape[1]} != kernel in_ch {in_ch}")
    _check_bias(p, out_ch)
    b, _, h, w = x4.shape
    ho = transposed_output_extent(h, k, p.stride, p.padding)
    wo = transposed_output_extent(w, k, p.stride, p.padding)
    dtype = float_dtype(x4, p.kernel)

    cols = np.tensordot(x4.astype(np.float64), p.kernel.astype(np.float64), axes=([1], [0]))
    full = np.zeros((b, out_ch, ho + 2 * p.padding, wo + 2 * p.padding), dtype=np.float64)
    _col2im(full, cols, p.stride)
    out = full[:, :, p.padding : p.padding + ho, p.padding : p.padding + wo]
    out = out + _per_channel(p.bias.astype(np.float64))
    return _unbatch(out.astype(dtype), squeeze)


def transposed_conv2d_backward(
    x: Tensor, p: ConvParams, grad_out: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients of sum(grad_out * transposed_conv2d_forward(x, p))."""
    x4, squeeze = _batched(x)
    g4, _ = _batched(grad_out, "grad_out")
    in_ch, out_ch, k, _ = p.kernel.shape
    b, _, h, w = x4.shape
    expected = (
        b,
        out_ch,
        transposed_output_extent(h, k, p.stride, p.padding),
        transposed_output_extent(w, k, p.stride, p.padding),
    )
    if g4.shape != expected:
        raise ShapeError(f"grad_out shape {g4.shape} != transposed conv output shape {expected}")
    dtype = float_dtype(x4, p.kernel)

    g = g4.astype(np.float64)
    cols = _windows(_pad(g, p.padding), k, p.stride, h, w)
    grad_x = np.tensordot(cols, p.kernel.astype(np.float64), axes=([1, 4, 5], [1, 2, 3]))
    grad_x = grad_x.transpose(0, 3, 1, 2)
    grad_kernel = np.tensordot(x4.astype(np.float64), cols, axes=([0, 2, 3], [0, 2, 3]))
    grad_bias = g.sum(axis=(0, 2, 3))
    return (
        _unbatch(grad_x.astype(dtype), squeeze),
        grad_kernel.astype(dtype),
        grad_bias.astype(dtype),
    )


@lru_cache(maxsize=None)
def upsample_matrix(n: int) -> np.ndarray:
    """
    (2n, n) linear map of 2x bilinear interpolation along one axis.

    Half-pixel centers: output o samples source coordinate (o + 0.5) / 2 - 0.5,
    clamped to the valid range, so edges replicate instead of extrapolating.
    """
    if n < 1:
        raise ShapeError(f"cannot upsample an axis of extent {n}")
    u = np.zeros((2 * n, n), dtype=np.float64)
    for o in range(2 * n):
        src = min(max((o + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        lam = src - i0
        u[o, i0] += 1.0 - lam
        u[o, i1] += lam
    u.setflags(write=False)
    return u


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Double both spatial extents by bilinear interpolation."""
    x4, squeeze = _batched(x)
    dtype = float_dtype(x4)
    uh, uw = upsample_matrix(x4.shape[2]), upsample_matrix(x4.shape[3])
    out = uh @ x4.astype(np.float64) @ uw.T
    return _unbatch(out.astype(dtype), squeeze)


def bilinear_upsample2x_backward(grad_out: Tensor) -> Tensor:
    """Adjoint of bilinear_upsample2x."""
    g4, squeeze = _batched(grad_out, "grad_out")
    h2, w2 = g4.shape[2], g4.shape[3]
    if h2 % 2 or w2 % 2:
        raise ShapeError(f"upsampled extents must be even, got {g4.shape}")
    dtype = float_dtype(g4)
    uh, uw = upsample_matrix(h2 // 2), upsample_matrix(w2 // 2)
    grad_x = uh.T @ g4.astype(np.float64) @ uw
    return _unbatch(grad_x.astype(dtype), squeeze)


@dataclass
class BatchNormParams:
    """Affine parameters and running statistics of one batchnorm layer."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def initial(cls, channels: int, dtype: npt.DTypeLike = np.float32) -> "BatchNormParams":
        """gamma 1, beta 0, running stats (0, 1)."""
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    mode: Mode
    squeeze: bool = False


def batchnorm_forward(x: Tensor, p: BatchNormParams, mode: Mode) -> tuple[Tensor, BatchNormCache]:
    """
    Per-channel normalization over batch and spatial axes.

    Train mode normalizes with the batch statistics and moves the running
    statistics by the momentum rule; eval mode uses the running statistics.
    """
    x4, squeeze = _batched(x)
    c = x4.shape[1]
    if p.gamma.shape != (c,):
        raise ShapeError(f"batchnorm expects {p.gamma.shape[0]} channels, got {c}")
    dtype = float_dtype(x4)
    x64 = x4.astype(np.float64)

    if mode == "train":
        mean = x64.mean(axis=(0, 2, 3))
        var = x64.var(axis=(0, 2, 3))
        m = p.momentum
        p.running_mean[...] = (1.0 - m) * p.running_mean.astype(np.float64) + m * mean
        p.running_var[...] = (1.0 - m) * p.running_var.astype(np.float64) + m * var
    elif mode == "eval":
        mean = p.running_mean.astype(np.float64)
        var = p.running_var.astype(np.float64)
    else:
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")

    inv_std = 1.0 / np.sqrt(var + p.eps)
    x_hat = (x64 - _per_channel(mean)) * _per_channel(inv_std)
    y = x_hat * _per_channel(p.gamma.astype(np.float64)) + _per_channel(p.beta.astype(np.float64))
    return _unbatch(y.astype(dtype), squeeze), BatchNormCache(x_hat, inv_std, mode, squeeze)


def batchnorm_backward(
    cache: BatchNormCache, p: BatchNormParams, grad_out: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients wrt input, gamma and beta."""
    g4, _ = _batched(grad_out, "grad_out")
    if g4.shape != cache.x_hat.shape:
        raise ShapeError(f"grad_out shape {g4.shape} != batchnorm output {cache.x_hat.shape}")
    dtype = float_dtype(g4)
    g = g4.astype(np.float64)
    axes = (0, 2, 3)

    grad_gamma = (g * cache.x_hat).sum(axis=axes)
    grad_beta = g.sum(axis=axes)
    d_hat = g * _per_channel(p.gamma.astype(np.float64))
    if cache.mode == "train":
        n = g.shape[0] * g.shape[2] * g.shape[3]
        grad_x = (
            _per_channel(cache.inv_std / n)
            * (
                n * d_hat
                - _per_channel(d_hat.sum(axis=axes))
                - cache.x_hat * _per_channel((d_hat * cache.x_hat).sum(axis=axes))
            )
        )
    else:
        grad_x = d_hat * _per_channel(cache.inv_std)
    return (
        _unbatch(grad_x.astype(dtype), cache.squeeze),
        grad_gamma.astype(p.gamma.dtype),
        grad_beta.astype(p.beta.dtype),
    )


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0).astype(float_dtype(x))


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    """Subgradient 0 at x = 0."""
    return (grad_out * (x > 0)).astype(float_dtype(grad_out))


def sigmoid(x: Tensor) -> Tensor:
    return expit(x).astype(float_dtype(x))


def sigmoid_backward(y: Tensor, grad_out: Tensor) -> Tensor:
    """Backward from the sigmoid output y."""
    y64 = y.astype(np.float64)
    return (grad_out * y64 * (1.0 - y64)).astype(float_dtype(grad_out))


@dataclass
class AdamState:
    """Moment buffers keyed by parameter name plus the step counter."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam update, applied in place.

    Parameters are visited in dict order; moments live in the parameter dtype
    and the update itself is evaluated in float64.
    """
    for name, value in params.items():
        if name not in grads:
            raise ShapeError(f"missing gradient for parameter {name!r}")
        if grads[name].shape != value.shape:
            raise ShapeError(
                f"gradient shape {grads[name].shape} != parameter {name!r} shape {value.shape}"
            )

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t

    for name, value in params.items():
        g = grads[name].astype(np.float64)
        m = state.m.setdefault(name, np.zeros_like(value))
        v = state.v.setdefault(name, np.zeros_like(value))
        m64 = state.beta1 * m.astype(np.float64) + (1.0 - state.beta1) * g
        v64 = state.beta2 * v.astype(np.float64) + (1.0 - state.beta2) * (g * g)
        m[...] = m64
        v[...] = v64
        update = state.lr * (m64 / bc1) / (np.sqrt(v64 / bc2) + state.eps)
        value[...] = value.astype(np.float64) - update
    return params, state
