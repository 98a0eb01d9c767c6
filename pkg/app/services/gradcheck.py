"""
Finite-difference gradient suite.

Every hand-written backward is compared against central differences of
the scalar objective sum(R * f(inputs)) for a fixed random R, on small
float64 instances. Relative error is ||analytic - numeric|| / max of the
two norms. Sample points are kept at least KINK_MARGIN away from activation
and soft-threshold kinks.

Components named in `perturb` get their analytic gradient scaled by
(1 + PERTURBATION) before comparison; the suite must then report them as
failing.
"""

import logging
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from app.core.errors import ConfigError
from app.schemas.config import Branches, LossWeights, NetworkConfig
from app.schemas.reports import GradcheckEntry, GradcheckReport
from app.services.losses import bce_weighted, composite_loss, dice_loss, focal_loss
from app.services.network import backward, build_model, forward
from app.services.perceptron import (
    PerceptronParams,
    dct_perceptron_backward,
    dct_perceptron_forward,
    ht_perceptron_backward,
    ht_perceptron_forward,
)
from app.services.tensor_ops import (
    BatchNormParams,
    ConvParams,
    batchnorm_backward,
    batchnorm_forward,
    bilinear_upsample2x,
    bilinear_upsample2x_backward,
    conv2d_backward,
    conv2d_forward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    transposed_conv2d_backward,
    transposed_conv2d_forward,
)
from app.services.transforms import idct2d, iht2d

logger = logging.getLogger(__name__)

OP_TOLERANCE = 1e-3
NETWORK_TOLERANCE = 2e-3
OP_STEP = 1e-4
NETWORK_STEP = 1e-5
KINK_MARGIN = 1e-2
PERTURBATION = 0.1
NETWORK_COORDS_PER_TENSOR = 4

# Analytic and numeric gradients, flattened and concatenated over all inputs.
GradPair = tuple[np.ndarray, np.ndarray]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), 0 when both vanish."""
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), 1e-12)
    return float(np.linalg.norm(analytic - numeric)) / scale


def numeric_gradient(
    objective: Callable[[], float],
    x: np.ndarray,
    step: float,
    coords: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Central differences of objective wrt x (perturbed in place) at flat coords, all by default."""
    indices = range(x.size) if coords is None else coords
    grads = np.empty(len(indices), dtype=np.float64)
    for out, i in enumerate(indices):
        at = np.unravel_index(i, x.shape)
        original = x[at]
        x[at] = original + step
        plus = objective()
        x[at] = original - step
        minus = objective()
        x[at] = original
        grads[out] = (plus - minus) / (2.0 * step)
    return grads


def _pairs(
    objective: Callable[[], float], tensors: Iterable[tuple[np.ndarray, np.ndarray]], step: float
) -> GradPair:
    analytic, numeric = [], []
    for x, grad in tensors:
        analytic.append(np.asarray(grad, dtype=np.float64).reshape(-1))
        numeric.append(numeric_gradient(objective, x, step))
    return np.concatenate(analytic), np.concatenate(numeric)


def _away_from_zero(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    signs = rng.choice([-1.0, 1.0], size=shape)
    return signs * rng.uniform(5 * KINK_MARGIN, 1.0, size=shape)


def _check_conv2d(rng: np.random.Generator) -> GradPair:
    x = rng.standard_normal((2, 3, 6, 6))
    p = ConvParams(rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4), stride=2, padding=1)
    r = rng.standard_normal(conv2d_forward(x, p).shape)
    grad_x, grad_k, grad_b = conv2d_backward(x, p, r)
    return _pairs(
        lambda: float(np.sum(r * conv2d_forward(x, p))),
        ((x, grad_x), (p.kernel, grad_k), (p.bias, grad_b)),
        OP_STEP,
    )


def _check_transposed_conv2d(rng: np.random.Generator) -> GradPair:
    x = rng.standard_normal((2, 3, 4, 4))
    p = ConvParams(rng.standard_normal((3, 2, 4, 4)), rng.standard_normal(2), stride=2, padding=1)
    r = rng.standard_normal(transposed_conv2d_forward(x, p).shape)
    grad_x, grad_k, grad_b = transposed_conv2d_backward(x, p, r)
    return _pairs(
        lambda: float(np.sum(r * transposed_conv2d_forward(x, p))),
        ((x, grad_x), (p.kernel, grad_k), (p.bias, grad_b)),
        OP_STEP,
    )


def _check_upsample(rng: np.random.Generator) -> GradPair:
    x = rng.standard_normal((2, 2, 4, 4))
    r = rng.standard_normal((2, 2, 8, 8))
    return _pairs(
        lambda: float(np.sum(r * bilinear_upsample2x(x))),
        ((x, bilinear_upsample2x_backward(r)),),
        OP_STEP,
    )


def _check_batchnorm(rng: np.random.Generator) -> GradPair:
    x = rng.standard_normal((3, 2, 4, 4)) * 2.0 + 0.5
    p = BatchNormParams.initial(2, np.float64)
    p.gamma[...] = rng.uniform(0.5, 1.5, size=2)
    p.beta[...] = rng.standard_normal(2)
    r = rng.standard_normal(x.shape)
    _, cache = batchnorm_forward(x, p, "train")
    grad_x, grad_gamma, grad_beta = batchnorm_backward(cache, p, r)
    return _pairs(
        lambda: float(np.sum(r * batchnorm_forward(x, p, "train")[0])),
        ((x, grad_x), (p.gamma, grad_gamma), (p.beta, grad_beta)),
        OP_STEP,
    )


def _check_relu(rng: np.random.Generator) -> GradPair:
    x = _away_from_zero(rng, (2, 3, 4, 4))
    r = rng.standard_normal(x.shape)
    return _pairs(lambda: float(np.sum(r * relu(x))), ((x, relu_backward(x, r)),), OP_STEP)


def _check_sigmoid(rng: np.random.Generator) -> GradPair:
    x = rng.standard_normal((2, 3, 4, 4)) * 3.0
    r = rng.standard_normal(x.shape)
    return _pairs(
        lambda: float(np.sum(r * sigmoid(x))), ((x, sigmoid_backward(sigmoid(x), r)),), OP_STEP
    )


def _perceptron_instance(
    rng: np.random.Generator, transform: str, batch: int = 2, channels: int = 2, size: int = 8
) -> tuple[np.ndarray, PerceptronParams]:
    """
    Input and parameters whose scaled coefficients sit at least 5 * KINK_MARGIN
    from every threshold, built in the transform domain.
    """
    shape = (channels, size, size)
    weight = rng.uniform(0.5, 1.5, size=shape)
    threshold = rng.uniform(0.1, 0.5, size=shape)
    margin = 5 * KINK_MARGIN
    active = rng.random((batch, *shape)) < 0.6
    magnitude = np.where(
        active,
        threshold + rng.uniform(margin, 1.0, size=(batch, *shape)),
        rng.uniform(0.0, 1.0, size=(batch, *shape)) * (threshold - margin),
    )
    coefficients = rng.choice([-1.0, 1.0], size=(batch, *shape)) * magnitude / weight
    inverse = iht2d if transform == "ht" else idct2d
    return inverse(coefficients), PerceptronParams(weight, threshold, transform)


def _check_perceptron(rng: np.random.Generator, transform: str) -> GradPair:
    fwd, bwd = (
        (ht_perceptron_forward, ht_perceptron_backward)
        if transform == "ht"
        else (dct_perceptron_forward, dct_perceptron_backward)
    )
    x, p = _perceptron_instance(rng, transform)
    r = rng.standard_normal(x.shape)
    _, ws = fwd(x, p)
    grad_x, grad_w, grad_t = bwd(ws, p, r)
    return _pairs(
        lambda: float(np.sum(r * fwd(x, p)[0])),
        ((x, grad_x), (p.weight, grad_w), (p.threshold, grad_t)),
        OP_STEP,
    )


def _loss_instance(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    probs = rng.uniform(0.1, 0.9, size=(2, 1, 6, 6))
    target = (rng.random(probs.shape) < 0.3).astype(np.float64)
    return probs, target


def _check_loss(rng: np.random.Generator, loss_fn: Callable[[np.ndarray, np.ndarray], tuple]) -> GradPair:
    probs, target = _loss_instance(rng)
    _, grad = loss_fn(probs, target)
    return _pairs(lambda: float(loss_fn(probs, target)[0]), ((probs, grad),), OP_STEP)


def _check_network(rng: np.random.Generator, branches: Branches) -> GradPair:
    """Composite loss through a tiny network (B=2, N=16, C=2, batch 1), sampled coordinates."""
    cfg = NetworkConfig(branches=branches, base_width=2, in_channels=2, in_size=16, init_seed=7)
    model = build_model(cfg, dtype=np.float64)
    for p in model.perceptrons():
        p.weight[...] = rng.uniform(0.8, 1.2, size=p.weight.shape)
        p.threshold[...] = rng.uniform(0.005, 0.02, size=p.threshold.shape)
    x = rng.standard_normal((1, 2, 16, 16))
    target = (rng.random((1, 1, 16, 16)) < 0.2).astype(np.float64)
    weights = LossWeights()

    def objective() -> float:
        probs, _ = forward(model, x, "train")
        return composite_loss(probs, target, weights)[0]

    probs, trace = forward(model, x, "train")
    _, grad_probs = composite_loss(probs, target, weights)
    grads = backward(model, trace, grad_probs)

    analytic, numeric = [], []
    for name, value in model.params.items():
        count = min(NETWORK_COORDS_PER_TENSOR, value.size)
        coords = sorted(rng.choice(value.size, size=count, replace=False).tolist())
        analytic.append(grads[name].reshape(-1)[coords].astype(np.float64))
        numeric.append(numeric_gradient(objective, value, NETWORK_STEP, coords))
    return np.concatenate(analytic), np.concatenate(numeric)


CHECKS: dict[str, tuple[Callable[[np.random.Generator], GradPair], float]] = {
    "conv2d": (_check_conv2d, OP_TOLERANCE),
    "transposed_conv2d": (_check_transposed_conv2d, OP_TOLERANCE),
    "bilinear_upsample2x": (_check_upsample, OP_TOLERANCE),
    "batchnorm": (_check_batchnorm, OP_TOLERANCE),
    "relu": (_check_relu, OP_TOLERANCE),
    "sigmoid": (_check_sigmoid, OP_TOLERANCE),
    "ht_perceptron": (lambda rng: _check_perceptron(rng, "ht"), OP_TOLERANCE),
    "dct_perceptron": (lambda rng: _check_perceptron(rng, "dct"), OP_TOLERANCE),
    "bce_weighted": (lambda rng: _check_loss(rng, lambda p, t: bce_weighted(p, t, 3.0)), OP_TOLERANCE),
    "dice_loss": (lambda rng: _check_loss(rng, dice_loss), OP_TOLERANCE),
    "focal_loss": (lambda rng: _check_loss(rng, focal_loss), OP_TOLERANCE),
    "composite_loss": (
        lambda rng: _check_loss(rng, lambda p, t: composite_loss(p, t, LossWeights())),
        OP_TOLERANCE,
    ),
    "network.ht": (lambda rng: _check_network(rng, Branches.HT_ONLY), NETWORK_TOLERANCE),
    "network.ht+dct": (lambda rng: _check_network(rng, Branches.HT_DCT), NETWORK_TOLERANCE),
}
COMPONENTS = tuple(CHECKS)


def run_gradcheck(
    perturb: Iterable[str] = (),
    components: Optional[Iterable[str]] = None,
    seed: int = 0,
) -> GradcheckReport:
    """
    Run the suite and report the relative error of every component.

    Args:
        perturb: Components whose analytic gradient is deliberately corrupted.
        components: Subset to run, in suite order; all by default.
        seed: Seed of the random instances.

    Returns:
        GradcheckReport with one entry per component run

    Raises:
        ConfigError: If a name is not a known component
    """
    perturb = frozenset(perturb)
    selected = COMPONENTS if components is None else tuple(c for c in COMPONENTS if c in set(components))
    unknown = (perturb | set(components or ())) - set(COMPONENTS)
    if unknown:
        raise ConfigError(f"unknown gradcheck components {sorted(unknown)}; known: {list(COMPONENTS)}")

    entries = []
    for index, name in enumerate(selected):
        check, tolerance = CHECKS[name]
        analytic, numeric = check(np.random.default_rng([seed, index]))
        if name in perturb:
            analytic = analytic * (1.0 + PERTURBATION)
        error = relative_error(analytic, numeric)
        entry = GradcheckEntry(
            component=name, max_rel_error=error, threshold=tolerance, passed=error <= tolerance
        )
        entries.append(entry)
        logger.info(f"gradcheck {name}: rel error {error:.2e} ({'ok' if entry.passed else 'FAIL'})")
    return GradcheckReport(entries=entries)
