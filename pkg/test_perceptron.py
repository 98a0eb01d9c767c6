"""Tests for the Hadamard and DCT perceptron blocks."""

import numpy as np
import pytest
from scipy.linalg import hadamard

from app.core.errors import ConfigError, ShapeError, StaleTraceError
from app.services.gradcheck import run_gradcheck
from app.services.perceptron import (
    PerceptronParams,
    dct_perceptron_forward,
    ht_perceptron_backward,
    ht_perceptron_forward,
    perceptron_backward,
    perceptron_forward,
    project_thresholds,
    soft_threshold,
)
from app.services.transforms import dct_matrix


def test_soft_threshold_examples():
    np.testing.assert_array_equal(
        soft_threshold(np.array([3.0, -3.0, 0.5, -0.5, 1.0]), 1.0), [2.0, -2.0, 0.0, 0.0, 0.0]
    )


def test_soft_threshold_rejects_negative_threshold():
    with pytest.raises(ConfigError) as excinfo:
        soft_threshold(np.ones(2), -0.1)
    assert excinfo.value.code == "E_CONFIG"
    with pytest.raises(ConfigError):
        soft_threshold(np.ones(2), np.array([0.1, -1e-12]))


def test_soft_threshold_is_monotone_and_nonexpansive():
    e = np.linspace(-3.0, 3.0, 601)
    for t in (0.0, 0.3, 1.0, 2.5):
        s = soft_threshold(e, t)
        assert np.all(np.diff(s) >= 0)
        assert np.all(np.abs(np.diff(s)) <= np.abs(np.diff(e)) + 1e-12)
        assert np.all(np.abs(s) <= np.abs(e))


def test_soft_threshold_at_zero_is_identity():
    e = np.random.default_rng(0).standard_normal(50)
    np.testing.assert_array_equal(soft_threshold(e, 0.0), e)


@pytest.mark.parametrize("transform,fwd", [("ht", ht_perceptron_forward), ("dct", dct_perceptron_forward)])
def test_identity_at_init(transform, fwd):
    x = np.random.default_rng(0).standard_normal((2, 3, 16, 16)).astype(np.float32)
    y, _ = fwd(x, PerceptronParams.identity(3, 16, transform))
    assert y.dtype == np.float32
    np.testing.assert_allclose(y, x, atol=1e-4)


def test_large_threshold_zeroes_output():
    p = PerceptronParams.identity(1, 8, "ht", np.float64)
    p.threshold[...] = 1e6
    y, _ = perceptron_forward(np.random.default_rng(1).standard_normal((1, 8, 8)), p)
    np.testing.assert_array_equal(y, 0.0)


def test_wrong_flavour_is_rejected():
    with pytest.raises(ShapeError):
        ht_perceptron_forward(np.ones((1, 4, 4)), PerceptronParams.identity(1, 4, "dct"))


def test_dct_block_accepts_non_power_of_two():
    y, _ = dct_perceptron_forward(np.ones((1, 6, 6)), PerceptronParams.identity(1, 6, "dct", np.float64))
    np.testing.assert_allclose(y, 1.0, atol=1e-12)


def test_ht_block_rejects_non_power_of_two():
    with pytest.raises(ShapeError):
        PerceptronParams.identity(1, 6, "ht")


def test_input_must_match_parameter_maps():
    with pytest.raises(ShapeError):
        perceptron_forward(np.ones((2, 8, 8)), PerceptronParams.identity(1, 8, "ht"))


def test_workspace_cannot_be_reused():
    p = PerceptronParams.identity(1, 4, "ht", np.float64)
    x = np.ones((1, 4, 4))
    _, ws = ht_perceptron_forward(x, p)
    ht_perceptron_backward(ws, p, np.ones_like(x))
    with pytest.raises(StaleTraceError):
        ht_perceptron_backward(ws, p, np.ones_like(x))


def test_batched_parameter_gradients_sum_over_batch():
    rng = np.random.default_rng(2)
    p = PerceptronParams(rng.uniform(0.5, 1.5, (2, 4, 4)), rng.uniform(0.0, 0.3, (2, 4, 4)), "dct")
    x = rng.standard_normal((2, 2, 4, 4))
    g = rng.standard_normal(x.shape)
    _, ws = perceptron_forward(x, p)
    _, grad_w, grad_t = perceptron_backward(ws, p, g)

    singles_w, singles_t = np.zeros_like(grad_w), np.zeros_like(grad_t)
    for b in range(2):
        _, ws_b = perceptron_forward(x[b], p)
        _, gw, gt = perceptron_backward(ws_b, p, g[b])
        singles_w += gw
        singles_t += gt
    np.testing.assert_allclose(grad_w, singles_w, atol=1e-12)
    np.testing.assert_allclose(grad_t, singles_t, atol=1e-12)


def test_project_thresholds_clamps_at_zero():
    p = PerceptronParams.identity(1, 2, "ht", np.float64)
    p.threshold[...] = np.array([[-0.5, 0.2], [0.0, -1e-9]])
    project_thresholds(p)
    np.testing.assert_array_equal(p.threshold, [[0.0, 0.2], [0.0, 0.0]])


def test_perceptron_gradients_match_finite_differences():
    report = run_gradcheck(components=["ht_perceptron", "dct_perceptron"])
    assert len(report.entries) == 2
    assert report.passed, report.model_dump()


@pytest.mark.parametrize("transform", ["ht", "dct"])
def test_zero_scaling_gives_zero_output(transform):
    p = PerceptronParams.identity(2, 8, transform, np.float64)
    p.weight[...] = 0.0
    y, _ = perceptron_forward(np.random.default_rng(3).standard_normal((2, 2, 8, 8)), p)
    np.testing.assert_array_equal(y, 0.0)


def _naive_block(x: np.ndarray, p: PerceptronParams) -> np.ndarray:
    n = x.shape[-1]
    out = np.empty_like(x)
    if p.transform == "ht":
        h = hadamard(n).astype(np.float64)
        fwd, inv = (lambda a: h @ a @ h), (lambda z: h @ z @ h / n**2)
    else:
        d = dct_matrix(n)
        fwd, inv = (lambda a: d @ a @ d.T), (lambda z: d.T @ z @ d)
    for c in range(x.shape[0]):
        e = p.weight[c] * fwd(x[c])
        out[c] = inv(np.sign(e) * np.maximum(np.abs(e) - p.threshold[c], 0.0))
    return out


@pytest.mark.parametrize("transform", ["ht", "dct"])
def test_block_matches_naive_composition(transform):
    rng = np.random.default_rng(4)
    p = PerceptronParams(rng.uniform(0.5, 1.5, (3, 8, 8)), rng.uniform(0.0, 2.0, (3, 8, 8)), transform)
    x = rng.standard_normal((3, 8, 8))
    y, _ = perceptron_forward(x, p)
    np.testing.assert_allclose(y, _naive_block(x, p), atol=1e-10)


def test_backward_treats_negative_thresholds_as_zero():
    rng = np.random.default_rng(5)
    raw = PerceptronParams(rng.uniform(0.5, 1.5, (1, 8, 8)), rng.uniform(-1.0, 1.0, (1, 8, 8)), "ht")
    clamped = PerceptronParams(raw.weight.copy(), np.maximum(raw.threshold, 0.0), "ht")
    x = rng.standard_normal((1, 8, 8))
    g = rng.standard_normal((1, 8, 8))

    y_raw, ws_raw = perceptron_forward(x, raw)
    y_clamped, ws_clamped = perceptron_forward(x, clamped)
    np.testing.assert_array_equal(y_raw, y_clamped)
    for a, b in zip(perceptron_backward(ws_raw, raw, g), perceptron_backward(ws_clamped, clamped, g)):
        np.testing.assert_array_equal(a, b)
