"""Tests for convolution, upsampling, batchnorm, activations and Adam."""

import numpy as np
import pytest

from app.core.errors import ConfigError, ShapeError
from app.services.gradcheck import run_gradcheck
from app.services.tensor_ops import (
    AdamState,
    BatchNormParams,
    ConvParams,
    adam_step,
    batchnorm_forward,
    bilinear_upsample2x,
    bilinear_upsample2x_backward,
    conv2d_backward,
    conv2d_forward,
    relu,
    sigmoid,
    transposed_conv2d_forward,
)


def _conv_oracle(x, kernel, bias, stride, padding):
    b, _, h, w = x.shape
    out_ch, in_ch, k, _ = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.zeros((b, out_ch, ho, wo))
    for n in range(b):
        for o in range(out_ch):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[n, o, i, j] = np.sum(patch * kernel[o]) + bias[o]
    return out


@pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 4), (2, 3, 7), (1, 0, 1)])
def test_conv2d_matches_loop_oracle(stride, padding, k):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8, 8))
    p = ConvParams(rng.standard_normal((4, 3, k, k)), rng.standard_normal(4), stride, padding)
    np.testing.assert_allclose(conv2d_forward(x, p), _conv_oracle(x, p.kernel, p.bias, stride, padding), atol=1e-10)


def test_conv2d_keeps_float32_storage():
    x = np.ones((1, 2, 8, 8), dtype=np.float32)
    p = ConvParams(np.ones((1, 2, 4, 4), dtype=np.float32), np.zeros(1, dtype=np.float32), 2, 1)
    y = conv2d_forward(x, p)
    assert y.dtype == np.float32
    assert y.shape == (1, 1, 4, 4)


def test_conv2d_rejects_channel_mismatch():
    p = ConvParams(np.ones((1, 3, 3, 3)), np.zeros(1), 1, 1)
    with pytest.raises(ShapeError):
        conv2d_forward(np.ones((1, 2, 8, 8)), p)


def test_conv_params_reject_stride_three():
    with pytest.raises(ConfigError):
        ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1), stride=3)


def test_transposed_conv_is_adjoint_of_conv():
    rng = np.random.default_rng(1)
    kernel = rng.standard_normal((2, 3, 4, 4))
    x = rng.standard_normal((1, 3, 8, 8))
    y = rng.standard_normal((1, 2, 4, 4))
    conv = ConvParams(kernel, np.zeros(2), 2, 1)
    tconv = ConvParams(kernel, np.zeros(3), 2, 1)
    lhs = np.sum(conv2d_forward(x, conv) * y)
    rhs = np.sum(x * transposed_conv2d_forward(y, tconv))
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_transposed_conv_doubles_extent():
    p = ConvParams(np.ones((3, 1, 4, 4)), np.zeros(1), 2, 1)
    assert transposed_conv2d_forward(np.ones((2, 3, 8, 8)), p).shape == (2, 1, 16, 16)


def test_upsample_preserves_constants_and_doubles_extent():
    x = np.full((1, 2, 4, 4), 3.5)
    y = bilinear_upsample2x(x)
    assert y.shape == (1, 2, 8, 8)
    np.testing.assert_allclose(y, 3.5)


def _upsample_axis_closed_form(x: np.ndarray, axis: int) -> np.ndarray:
    """out[2i] = x[i-1]/4 + 3x[i]/4, out[2i+1] = 3x[i]/4 + x[i+1]/4, edges replicated."""
    x = np.moveaxis(x, axis, -1)
    xp = np.concatenate([x[..., :1], x, x[..., -1:]], axis=-1)
    out = np.empty(x.shape[:-1] + (2 * x.shape[-1],))
    out[..., 0::2] = 0.25 * xp[..., :-2] + 0.75 * xp[..., 1:-1]
    out[..., 1::2] = 0.75 * xp[..., 1:-1] + 0.25 * xp[..., 2:]
    return np.moveaxis(out, -1, axis)


@pytest.mark.parametrize("h,w", [(1, 1), (2, 2), (3, 5), (8, 8)])
def test_upsample_matches_closed_form(h, w):
    x = np.random.default_rng(h * w).random((2, 3, h, w))
    expected = _upsample_axis_closed_form(_upsample_axis_closed_form(x, 2), 3)
    np.testing.assert_allclose(bilinear_upsample2x(x), expected, atol=1e-12)


def test_upsample_small_examples():
    np.testing.assert_allclose(bilinear_upsample2x(np.array([[[[0.0, 1.0]]]]))[0, 0, 0], [0.0, 0.25, 0.75, 1.0])
    np.testing.assert_allclose(bilinear_upsample2x(np.full((1, 1, 1, 1), 0.7)), np.full((1, 1, 2, 2), 0.7))


def test_upsample_backward_is_adjoint():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 4, 4))
    g = rng.standard_normal((2, 3, 8, 8))
    assert np.sum(bilinear_upsample2x(x) * g) == pytest.approx(np.sum(x * bilinear_upsample2x_backward(g)))


def test_batchnorm_train_normalizes_and_moves_running_stats():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 2, 5, 5)) * 3.0 + 2.0
    p = BatchNormParams.initial(2, np.float64)
    y, _ = batchnorm_forward(x, p, "train")
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-4)
    np.testing.assert_allclose(p.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(p.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))


def test_batchnorm_eval_uses_running_stats():
    p = BatchNormParams.initial(1, np.float64)
    p.running_mean[...] = 2.0
    p.running_var[...] = 4.0
    y, _ = batchnorm_forward(np.full((1, 1, 2, 2), 4.0), p, "eval")
    np.testing.assert_allclose(y, 2.0 / np.sqrt(4.0 + 1e-5))


def test_batchnorm_rejects_unknown_mode():
    with pytest.raises(ConfigError):
        batchnorm_forward(np.ones((1, 1, 2, 2)), BatchNormParams.initial(1), "predict")


def test_activations():
    x = np.array([-2.0, 0.0, 3.0])
    np.testing.assert_array_equal(relu(x), [0.0, 0.0, 3.0])
    assert sigmoid(np.array([0.0]))[0] == 0.5
    assert np.all(np.isfinite(sigmoid(np.array([-1000.0, 1000.0]))))


def test_adam_first_step_moves_by_learning_rate():
    params = {"w": np.array([1.0, -1.0, 0.5])}
    grads = {"w": np.array([0.3, -2.0, 1e-3])}
    state = AdamState(lr=0.01)
    adam_step(params, grads, state)
    assert state.step_count == 1
    np.testing.assert_allclose(params["w"], [0.99, -0.99, 0.49], atol=1e-5)


def test_adam_rejects_missing_gradient():
    with pytest.raises(ShapeError):
        adam_step({"w": np.zeros(2)}, {}, AdamState())


def test_op_gradients_match_finite_differences():
    report = run_gradcheck(
        components=["conv2d", "transposed_conv2d", "bilinear_upsample2x", "batchnorm", "relu", "sigmoid"]
    )
    assert [e.component for e in report.entries] == [
        "conv2d",
        "transposed_conv2d",
        "bilinear_upsample2x",
        "batchnorm",
        "relu",
        "sigmoid",
    ]
    assert report.passed, report.model_dump()


def test_adam_zero_gradient_leaves_parameters_and_counts_step():
    params = {"w": np.array([1.0, -2.0]), "b": np.array([0.5])}
    before = {k: v.copy() for k, v in params.items()}
    state = AdamState()
    for expected_step in (1, 2):
        adam_step(params, {k: np.zeros_like(v) for k, v in params.items()}, state)
        assert state.step_count == expected_step
    for name, value in params.items():
        np.testing.assert_array_equal(value, before[name])


def test_adam_two_steps_match_float64_reference():
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    theta = np.array([0.3, -1.2, 2.0])
    gradients = [np.array([0.5, -0.1, 2.0]), np.array([-0.3, 0.2, 1.0])]

    expected = theta.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    for t, g in enumerate(gradients, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g**2
        expected = expected - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)

    params = {"theta": theta.copy()}
    state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps)
    for g in gradients:
        adam_step(params, {"theta": g}, state)
    assert state.step_count == 2
    np.testing.assert_allclose(params["theta"], expected, rtol=0, atol=1e-7)


def test_conv_backward_of_zero_gradient_is_zero():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 8, 8))
    p = ConvParams(rng.standard_normal((4, 3, 4, 4)), rng.standard_normal(4), 2, 1)
    grad_x, grad_kernel, grad_bias = conv2d_backward(x, p, np.zeros((2, 4, 4, 4)))
    assert grad_x.shape == x.shape and grad_kernel.shape == p.kernel.shape
    assert not np.any(grad_x) and not np.any(grad_kernel) and not np.any(grad_bias)


def test_conv_backward_through_identity_kernel_passes_gradient():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 5, 5))
    g = rng.standard_normal((2, 3, 5, 5))
    p = ConvParams(np.eye(3)[:, :, None, None], np.zeros(3))
    np.testing.assert_array_equal(conv2d_forward(x, p), x)
    grad_x, grad_kernel, grad_bias = conv2d_backward(x, p, g)
    np.testing.assert_allclose(grad_x, g, atol=1e-15)
    np.testing.assert_allclose(grad_bias, g.sum(axis=(0, 2, 3)))
    np.testing.assert_allclose(grad_kernel[:, :, 0, 0], np.einsum("bohw,bihw->oi", g, x))
