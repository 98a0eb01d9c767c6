"""
HT-UNet and TD-FusionUNet.

Each branch is an encoder of three stride-2 conv blocks, each followed by a
transform-domain perceptron, a stride-1 bottleneck block, and two decoder
blocks that upsample, concatenate the matching encoder output and convolve.
A conv block is conv -> batchnorm -> ReLU. The single-branch network feeds
its last decoder block into a transposed-conv head with a sigmoid.

The dual-branch network runs an HT branch and a DCT branch side by side and
fuses them after every decoder stage, F = phi(F_ht) + psi(F_dct) with 1x1
convs; the fused map is what both branches upsample at the next stage, and
the last fused map feeds the shared head.

Gradients are written out by hand and composed stage by stage in reverse.
"""

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

import numpy as np
import numpy.typing as npt

from app.core.errors import ConfigError, ShapeError, StaleTraceError
from app.schemas.config import Branches, NetworkConfig
from app.services.perceptron import (
    PerceptronParams,
    PerceptronWorkspace,
    TransformKind,
    perceptron_backward,
    perceptron_forward,
    project_thresholds,
)
from app.services.tensor_ops import (
    BatchNormCache,
    BatchNormParams,
    ConvParams,
    Mode,
    Tensor,
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

logger = logging.getLogger(__name__)

HEAD_BIAS_INIT = -2.0
ENCODER_STAGES = ("enc1", "enc2", "enc3")
BRANCH_TRANSFORMS: dict[str, TransformKind] = {"ht": "ht", "dct": "dct"}


@dataclass
class ModelParams:
    """Trainable tensors and batchnorm running statistics, in a stable order."""

    config: NetworkConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]

    @property
    def branches(self) -> list[str]:
        return ["ht"] if self.config.branches == Branches.HT_ONLY else ["ht", "dct"]

    def conv(self, prefix: str, stride: int = 1, padding: int = 0) -> ConvParams:
        return ConvParams(
            self.params[f"{prefix}.weight"], self.params[f"{prefix}.bias"], stride, padding
        )

    def bn(self, prefix: str) -> BatchNormParams:
        return BatchNormParams(
            gamma=self.params[f"{prefix}.gamma"],
            beta=self.params[f"{prefix}.beta"],
            running_mean=self.buffers[f"{prefix}.running_mean"],
            running_var=self.buffers[f"{prefix}.running_var"],
        )

    def perceptron(self, prefix: str, transform: TransformKind) -> PerceptronParams:
        return PerceptronParams(
            self.params[f"{prefix}.weight"], self.params[f"{prefix}.threshold"], transform
        )

    def perceptrons(self) -> list[PerceptronParams]:
        """Every perceptron block of the model."""
        if not self.config.use_perceptrons:
            return []
        return [
            self.perceptron(f"{branch}.{stage}.perceptron", BRANCH_TRANSFORMS[branch])
            for branch in self.branches
            for stage in ENCODER_STAGES
        ]

    def project_thresholds(self) -> None:
        """Restore T >= 0 after an optimizer step."""
        for p in self.perceptrons():
            project_thresholds(p)

    def astype(self, dtype: npt.DTypeLike) -> "ModelParams":
        """Deep copy with every tensor cast to dtype."""
        return ModelParams(
            config=self.config.model_copy(),
            params={k: v.astype(dtype) for k, v in self.params.items()},
            buffers={k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def copy(self) -> "ModelParams":
        return self.astype(next(iter(self.params.values())).dtype)


@dataclass
class _BlockCache:
    x: np.ndarray
    conv: ConvParams
    bn: BatchNormParams
    bn_cache: BatchNormCache
    pre_relu: np.ndarray


@dataclass
class ForwardTrace:
    """Activations and workspaces of one forward call."""

    mode: Mode
    x_shape: tuple[int, ...]
    blocks: dict[str, _BlockCache] = field(default_factory=dict)
    perceptrons: dict[str, PerceptronWorkspace] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    upsampled_channels: dict[str, int] = field(default_factory=dict)
    consumed: bool = False


def _stage_geometry(cfg: NetworkConfig) -> dict[str, tuple[int, int, int, int, int]]:
    """Per conv block: (in_ch, out_ch, kernel, stride, padding)."""
    b, k = cfg.base_width, cfg.interior_kernel
    same = (k - 1) // 2
    return {
        "enc1": (cfg.in_channels, b, cfg.stem_kernel, 2, cfg.stem_kernel // 2 - 1),
        "enc2": (b, 2 * b, k, 2, same),
        "enc3": (2 * b, 4 * b, k, 2, same),
        "bottleneck": (4 * b, 4 * b, k, 1, same),
        "dec1": (4 * b + 2 * b, 2 * b, k, 1, same),
        "dec2": (2 * b + b, b, k, 1, same),
    }


def _perceptron_sizes(cfg: NetworkConfig) -> dict[str, tuple[int, int]]:
    """Per encoder stage: (channels, spatial extent) of its perceptron block."""
    b, n = cfg.base_width, cfg.in_size
    return {"enc1": (b, n // 2), "enc2": (2 * b, n // 4), "enc3": (4 * b, n // 8)}


def _uniform_kernel(
    rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype: npt.DTypeLike
) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _build(cfg: NetworkConfig, dtype: npt.DTypeLike) -> ModelParams:
    rng = np.random.default_rng(cfg.init_seed)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    geometry = _stage_geometry(cfg)
    sizes = _perceptron_sizes(cfg)
    branches = ["ht"] if cfg.branches == Branches.HT_ONLY else ["ht", "dct"]

    for branch in branches:
        for stage, (cin, cout, k, _, _) in geometry.items():
            prefix = f"{branch}.{stage}"
            params[f"{prefix}.conv.weight"] = _uniform_kernel(rng, (cout, cin, k, k), cin * k * k, dtype)
            params[f"{prefix}.conv.bias"] = np.zeros(cout, dtype=dtype)
            bn = BatchNormParams.initial(cout, dtype)
            params[f"{prefix}.bn.gamma"] = bn.gamma
            params[f"{prefix}.bn.beta"] = bn.beta
            buffers[f"{prefix}.bn.running_mean"] = bn.running_mean
            buffers[f"{prefix}.bn.running_var"] = bn.running_var
            if cfg.use_perceptrons and stage in sizes:
                channels, size = sizes[stage]
                p = PerceptronParams.identity(channels, size, BRANCH_TRANSFORMS[branch], dtype)
                params[f"{prefix}.perceptron.weight"] = p.weight
                params[f"{prefix}.perceptron.threshold"] = p.threshold

    if len(branches) == 2:
        b = cfg.base_width
        for stage, width in (("1", 2 * b), ("2", b)):
            for mapping in ("phi", "psi"):
                prefix = f"fusion.{mapping}{stage}"
                params[f"{prefix}.weight"] = _uniform_kernel(rng, (width, width, 1, 1), width, dtype)
                params[f"{prefix}.bias"] = np.zeros(width, dtype=dtype)

    k, b = cfg.stem_kernel, cfg.base_width
    params["head.weight"] = _uniform_kernel(rng, (b, cfg.out_channels, k, k), b * k * k, dtype)
    params["head.bias"] = np.full(cfg.out_channels, HEAD_BIAS_INIT, dtype=dtype)
    logger.debug(
        f"Built {cfg.branches.value} network (B={cfg.base_width}, in={cfg.in_channels}, "
        f"N={cfg.in_size}) with {param_count(params)} parameters"
    )
    return ModelParams(config=cfg, params=params, buffers=buffers)


def build_ht_unet(cfg: NetworkConfig, dtype: npt.DTypeLike = np.float32) -> ModelParams:
    """Single-branch HT-UNet."""
    if cfg.branches != Branches.HT_ONLY:
        raise ConfigError(f"build_ht_unet needs branches='ht', got {cfg.branches.value!r}")
    return _build(cfg, dtype)


def build_td_fusion_unet(cfg: NetworkConfig, dtype: npt.DTypeLike = np.float32) -> ModelParams:
    """Dual-branch TD-FusionUNet."""
    if cfg.branches != Branches.HT_DCT:
        raise ConfigError(f"build_td_fusion_unet needs branches='ht+dct', got {cfg.branches.value!r}")
    return _build(cfg, dtype)


def build_model(cfg: NetworkConfig, dtype: npt.DTypeLike = np.float32) -> ModelParams:
    """Dispatch on cfg.branches."""
    if cfg.branches == Branches.HT_ONLY:
        return build_ht_unet(cfg, dtype)
    return build_td_fusion_unet(cfg, dtype)


def param_count(params: Union[ModelParams, Mapping[str, np.ndarray]]) -> int:
    """Total element count over all trainable tensors."""
    tensors = params.params if isinstance(params, ModelParams) else params
    return int(sum(v.size for v in tensors.values()))


def predict_mask(probs: Tensor, threshold: float = 0.5) -> np.ndarray:
    """1 where probs > threshold (strict), else 0."""
    return (np.asarray(probs) > threshold).astype(np.uint8)


def _conv_block_forward(
    model: ModelParams, prefix: str, x: np.ndarray, stride: int, padding: int, mode: Mode, trace: ForwardTrace
) -> np.ndarray:
    conv = model.conv(f"{prefix}.conv", stride, padding)
    bn = model.bn(f"{prefix}.bn")
    a = conv2d_forward(x, conv)
    b, bn_cache = batchnorm_forward(a, bn, mode)
    trace.blocks[prefix] = _BlockCache(x, conv, bn, bn_cache, b)
    return relu(b)


def _conv_block_backward(
    trace: ForwardTrace, prefix: str, grad: np.ndarray, grads: dict[str, np.ndarray]
) -> np.ndarray:
    cache = trace.blocks[prefix]
    g = relu_backward(cache.pre_relu, grad)
    g, grad_gamma, grad_beta = batchnorm_backward(cache.bn_cache, cache.bn, g)
    g, grad_kernel, grad_bias = conv2d_backward(cache.x, cache.conv, g)
    grads[f"{prefix}.bn.gamma"] += grad_gamma
    grads[f"{prefix}.bn.beta"] += grad_beta
    grads[f"{prefix}.conv.weight"] += grad_kernel
    grads[f"{prefix}.conv.bias"] += grad_bias
    return g


def _encode(
    model: ModelParams, branch: str, x: np.ndarray, mode: Mode, trace: ForwardTrace
) -> dict[str, np.ndarray]:
    geometry = _stage_geometry(model.config)
    outputs: dict[str, np.ndarray] = {}
    h = x
    for stage in ENCODER_STAGES:
        _, _, _, stride, padding = geometry[stage]
        h = _conv_block_forward(model, f"{branch}.{stage}", h, stride, padding, mode, trace)
        if model.config.use_perceptrons:
            prefix = f"{branch}.{stage}.perceptron"
            h, ws = perceptron_forward(h, model.perceptron(prefix, BRANCH_TRANSFORMS[branch]))
            trace.perceptrons[prefix] = ws
        outputs[stage] = h
    _, _, _, stride, padding = geometry["bottleneck"]
    outputs["bottleneck"] = _conv_block_forward(
        model, f"{branch}.bottleneck", h, stride, padding, mode, trace
    )
    return outputs


def _encode_backward(
    model: ModelParams,
    trace: ForwardTrace,
    branch: str,
    grad_bottleneck: np.ndarray,
    skip_grads: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
) -> np.ndarray:
    g = _conv_block_backward(trace, f"{branch}.bottleneck", grad_bottleneck, grads)
    for stage in reversed(ENCODER_STAGES):
        if stage in skip_grads:
            g = g + skip_grads[stage]
        if model.config.use_perceptrons:
            prefix = f"{branch}.{stage}.perceptron"
            p = model.perceptron(prefix, BRANCH_TRANSFORMS[branch])
            g, grad_w, grad_t = perceptron_backward(trace.perceptrons[prefix], p, g)
            grads[f"{prefix}.weight"] += grad_w
            grads[f"{prefix}.threshold"] += grad_t
        g = _conv_block_backward(trace, f"{branch}.{stage}", g, grads)
    return g


def _decode_stage(
    model: ModelParams, prefix: str, below: np.ndarray, skip: np.ndarray, mode: Mode, trace: ForwardTrace
) -> np.ndarray:
    _, _, _, stride, padding = _stage_geometry(model.config)[prefix.split(".")[-1]]
    up = bilinear_upsample2x(below)
    trace.upsampled_channels[prefix] = below.shape[1]
    return _conv_block_forward(model, prefix, np.concatenate([up, skip], axis=1), stride, padding, mode, trace)


def _decode_stage_backward(
    trace: ForwardTrace, prefix: str, grad: np.ndarray, grads: dict[str, np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """Returns (grad wrt the upsampled input, grad wrt the skip)."""
    g = _conv_block_backward(trace, prefix, grad, grads)
    c = trace.upsampled_channels[prefix]
    return bilinear_upsample2x_backward(g[:, :c]), g[:, c:]


def _fuse(
    model: ModelParams, stage: str, ht: np.ndarray, dct: np.ndarray, trace: ForwardTrace
) -> np.ndarray:
    trace.tensors[f"fusion{stage}.ht"] = ht
    trace.tensors[f"fusion{stage}.dct"] = dct
    return conv2d_forward(ht, model.conv(f"fusion.phi{stage}")) + conv2d_forward(
        dct, model.conv(f"fusion.psi{stage}")
    )


def _fuse_backward(
    model: ModelParams, stage: str, grad: np.ndarray, trace: ForwardTrace, grads: dict[str, np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    results = []
    for mapping, branch in (("phi", "ht"), ("psi", "dct")):
        prefix = f"fusion.{mapping}{stage}"
        g, grad_kernel, grad_bias = conv2d_backward(
            trace.tensors[f"fusion{stage}.{branch}"], model.conv(prefix), grad
        )
        grads[f"{prefix}.weight"] += grad_kernel
        grads[f"{prefix}.bias"] += grad_bias
        results.append(g)
    return results[0], results[1]


def _head(model: ModelParams) -> ConvParams:
    k = model.config.stem_kernel
    return model.conv("head", stride=2, padding=k // 2 - 1)


def forward(model: ModelParams, x: Tensor, mode: Mode = "eval") -> tuple[Tensor, ForwardTrace]:
    """
    Probability map for a batch (B, C, N, N).

    Returns probabilities of shape (B, out_channels, N, N) and the trace the
    backward pass needs.
    """
    cfg = model.config
    expected = (cfg.in_channels, cfg.in_size, cfg.in_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"network input must be (B, {', '.join(map(str, expected))}), got {x.shape}")
    trace = ForwardTrace(mode=mode, x_shape=x.shape)

    encoded = {branch: _encode(model, branch, x, mode, trace) for branch in model.branches}
    if len(model.branches) == 1:
        e = encoded["ht"]
        d1 = _decode_stage(model, "ht.dec1", e["bottleneck"], e["enc2"], mode, trace)
        features = _decode_stage(model, "ht.dec2", d1, e["enc1"], mode, trace)
    else:
        d1 = {
            branch: _decode_stage(model, f"{branch}.dec1", e["bottleneck"], e["enc2"], mode, trace)
            for branch, e in encoded.items()
        }
        fused1 = _fuse(model, "1", d1["ht"], d1["dct"], trace)
        d2 = {
            branch: _decode_stage(model, f"{branch}.dec2", fused1, e["enc1"], mode, trace)
            for branch, e in encoded.items()
        }
        features = _fuse(model, "2", d2["ht"], d2["dct"], trace)

    trace.tensors["features"] = features
    probs = sigmoid(transposed_conv2d_forward(features, _head(model)))
    trace.tensors["probs"] = probs
    return probs, trace


def backward(
    model: ModelParams, trace: ForwardTrace, grad_probs: Tensor, return_input_grad: bool = False
) -> dict[str, np.ndarray] | tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of sum(grad_probs * probs) for every trainable tensor."""
    if trace.consumed:
        raise StaleTraceError("forward trace was already consumed by a backward pass")
    probs = trace.tensors["probs"]
    if grad_probs.shape != probs.shape:
        raise StaleTraceError(f"grad_probs shape {grad_probs.shape} != trace output {probs.shape}")
    trace.consumed = True
    grads = {name: np.zeros_like(value) for name, value in model.params.items()}

    g = sigmoid_backward(probs, grad_probs)
    g, grad_kernel, grad_bias = transposed_conv2d_backward(trace.tensors["features"], _head(model), g)
    grads["head.weight"] += grad_kernel
    grads["head.bias"] += grad_bias

    grad_x: Optional[np.ndarray] = None
    if len(model.branches) == 1:
        g, skip1 = _decode_stage_backward(trace, "ht.dec2", g, grads)
        g, skip2 = _decode_stage_backward(trace, "ht.dec1", g, grads)
        grad_x = _encode_backward(model, trace, "ht", g, {"enc1": skip1, "enc2": skip2}, grads)
    else:
        g_ht, g_dct = _fuse_backward(model, "2", g, trace, grads)
        grad_fused1 = None
        skips1: dict[str, np.ndarray] = {}
        for branch, gb in (("ht", g_ht), ("dct", g_dct)):
            g_below, skips1[branch] = _decode_stage_backward(trace, f"{branch}.dec2", gb, grads)
            grad_fused1 = g_below if grad_fused1 is None else grad_fused1 + g_below
        g_ht, g_dct = _fuse_backward(model, "1", grad_fused1, trace, grads)
        for branch, gb in (("ht", g_ht), ("dct", g_dct)):
            g_bottleneck, skip2 = _decode_stage_backward(trace, f"{branch}.dec1", gb, grads)
            gx = _encode_backward(
                model, trace, branch, g_bottleneck, {"enc1": skips1[branch], "enc2": skip2}, grads
            )
            grad_x = gx if grad_x is None else grad_x + gx

    if return_input_grad:
        return grads, grad_x
    return grads
