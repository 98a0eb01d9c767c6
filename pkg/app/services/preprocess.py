"""
Sample preprocessing.

Random margin cropping turns the sparse binary pre-fire mask into soft
values; Gaussian-mixture smoothing averages blurs of a map at several
scales. Flips, per-channel normalization with training-split statistics and
the seeded 8:1:1 split complete the pipeline.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Iterable, Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from app.core.errors import ConfigError, DatasetError, ShapeError
from app.schemas.config import MarginConfig, PreprocessConfig, SmoothingConfig
from app.schemas.dataset import ChannelStats, Manifest, Split

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-6
SMOOTHED_SUFFIX = "_smoothed"
MASK_ROLES = frozenset({"prefire_mask"})
MIN_SPLIT_SAMPLES = 10


@dataclass
class Sample:
    """One input stack and its target mask."""

    sample_id: str
    inputs: np.ndarray
    target: np.ndarray


def _open_interval_f32(lo: float, hi: float) -> tuple[np.float32, np.float32]:
    """Closest float32 bounds strictly inside (lo, hi)."""
    lo32 = np.nextafter(np.float32(lo), np.float32(np.inf))
    hi32 = np.nextafter(np.float32(hi), np.float32(-np.inf))
    return lo32, hi32


def random_margin_crop(
    mask: np.ndarray, cfg: MarginConfig, rng: np.random.Generator
) -> np.ndarray:
    """
    Uncertain pixels (-1) become 0; then every 0 is replaced by a uniform draw
    from the background range and every 1 by a draw from the fire range.
    """
    if not np.isin(mask, (-1, 0, 1)).all():
        bad = np.unique(mask[~np.isin(mask, (-1, 0, 1))])
        raise ValueError(f"margin crop expects values in {{-1, 0, 1}}, found {bad[:5].tolist()}")
    fire = mask == 1
    background = rng.uniform(*cfg.background_range, size=mask.shape).astype(np.float32)
    burning = rng.uniform(*cfg.fire_range, size=mask.shape).astype(np.float32)
    background = np.clip(background, *_open_interval_f32(*cfg.background_range))
    burning = np.clip(burning, *_open_interval_f32(*cfg.fire_range))
    return np.where(fire, burning, background)


def gaussian_blur(mask: np.ndarray, sigma: float) -> np.ndarray:
    """Separable normalized Gaussian, truncated at ceil(3 sigma), reflect boundary."""
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    dtype = mask.dtype if np.issubdtype(mask.dtype, np.floating) else np.float64
    blurred = gaussian_filter(
        mask.astype(np.float64), sigma=sigma, mode="reflect", radius=math.ceil(3.0 * sigma)
    )
    return blurred.astype(dtype)


def gaussian_mixture_smooth(mask: np.ndarray, cfg: SmoothingConfig) -> np.ndarray:
    """Mean of gaussian_blur(mask, sigma) over the configured scales."""
    dtype = mask.dtype if np.issubdtype(mask.dtype, np.floating) else np.float64
    blurs = [gaussian_blur(mask.astype(np.float64), s) for s in cfg.sigmas]
    return np.mean(blurs, axis=0).astype(dtype)


def flip_horizontal(sample: Sample) -> Sample:
    return replace(
        sample, inputs=sample.inputs[..., ::-1].copy(), target=sample.target[..., ::-1].copy()
    )


def flip_vertical(sample: Sample) -> Sample:
    return replace(
        sample,
        inputs=sample.inputs[..., ::-1, :].copy(),
        target=sample.target[..., ::-1, :].copy(),
    )


def augment_flip(sample: Sample, rng: np.random.Generator) -> Sample:
    """Horizontal and vertical flips, each with probability 0.5, on inputs and target alike."""
    if rng.random() < 0.5:
        sample = flip_horizontal(sample)
    if rng.random() < 0.5:
        sample = flip_vertical(sample)
    return sample


def output_roles(roles: list[str], cfg: PreprocessConfig) -> list[str]:
    """Channel roles after smoothing (appended maps get a _smoothed suffix)."""
    if not cfg.append_smoothed or not cfg.smoothing_sigmas:
        return list(roles)
    return list(roles) + [f"{r}{SMOOTHED_SUFFIX}" for r in roles if r in cfg.smooth_roles]


def is_mask_like(role: str) -> bool:
    """Mask-like channels keep their [0, 1] range and skip normalization."""
    return role in MASK_ROLES or role.endswith(SMOOTHED_SUFFIX)


def transform_inputs(
    inputs: np.ndarray, roles: list[str], cfg: PreprocessConfig, rng: np.random.Generator
) -> np.ndarray:
    """Margin cropping and smoothing of a (C, H, W) stack; returns float32."""
    if inputs.shape[0] != len(roles):
        raise ShapeError(f"input has {inputs.shape[0]} channels but {len(roles)} roles")
    channels = [c.astype(np.float32) for c in inputs]
    if cfg.margin_crop and "prefire_mask" in roles:
        i = roles.index("prefire_mask")
        channels[i] = random_margin_crop(np.rint(inputs[i]), cfg.margin, rng)

    smoothing = cfg.smoothing
    if smoothing is not None:
        extra = []
        for i, role in enumerate(roles):
            if role not in cfg.smooth_roles:
                continue
            smoothed = gaussian_mixture_smooth(channels[i].astype(np.float64), smoothing)
            if cfg.append_smoothed:
                extra.append(smoothed.astype(np.float32))
            else:
                channels[i] = smoothed.astype(np.float32)
        channels.extend(extra)
    return np.stack(channels).astype(np.float32)


def compute_channel_stats(stacks: Iterable[np.ndarray], roles: list[str]) -> ChannelStats:
    """Per-channel mean and std (floored) over the given stacks, accumulated in float64."""
    total = None
    total_sq = None
    count = 0
    for x in stacks:
        x64 = x.astype(np.float64)
        sums = x64.sum(axis=(1, 2))
        sq = (x64 * x64).sum(axis=(1, 2))
        total = sums if total is None else total + sums
        total_sq = sq if total_sq is None else total_sq + sq
        count += x.shape[1] * x.shape[2]
    if total is None:
        raise DatasetError("cannot compute channel statistics from an empty training split")
    if len(total) != len(roles):
        raise ShapeError(f"stacks have {len(total)} channels but {len(roles)} roles")
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    std = np.maximum(np.sqrt(var), STD_FLOOR)
    return ChannelStats(
        mean=mean.tolist(), std=std.tolist(), exempt=[is_mask_like(r) for r in roles]
    )


def normalize_channels(x: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """(x - mean) / std per channel of a (C, H, W) or (B, C, H, W) stack; exempt channels pass through."""
    c = x.shape[-3]
    if c != len(stats.mean):
        raise ShapeError(f"stats describe {len(stats.mean)} channels, input has {c}")
    mean = np.array(stats.mean, dtype=np.float64)
    std = np.maximum(np.array(stats.std, dtype=np.float64), STD_FLOOR)
    exempt = np.array(stats.exempt, dtype=bool)
    mean[exempt] = 0.0
    std[exempt] = 1.0
    out = (x.astype(np.float64) - mean[:, None, None]) / std[:, None, None]
    return out.astype(np.float32)


def split_dataset(
    manifest: Manifest, ratios: tuple[int, int, int] = (8, 1, 1), seed: int = 0
) -> Manifest:
    """
    Seeded shuffle, then contiguous train/val/test runs.

    val and test get floor(n * r / sum(r)); the rounding residue goes to train.
    """
    n = len(manifest.samples)
    if n < MIN_SPLIT_SAMPLES:
        raise DatasetError(f"split needs at least {MIN_SPLIT_SAMPLES} samples, got {n}")
    if any(r < 0 for r in ratios) or sum(ratios) == 0:
        raise ConfigError(f"invalid split ratios {ratios}")
    total = sum(ratios)
    n_val = n * ratios[1] // total
    n_test = n * ratios[2] // total
    n_train = n - n_val - n_test

    order = np.random.default_rng(seed).permutation(n)
    labels: list[Optional[Split]] = [None] * n
    for rank, index in enumerate(order):
        if rank < n_train:
            labels[index] = Split.TRAIN
        elif rank < n_train + n_val:
            labels[index] = Split.VAL
        else:
            labels[index] = Split.TEST
    samples = [s.model_copy(update={"split": label}) for s, label in zip(manifest.samples, labels)]
    logger.info(f"Split {n} samples into {n_train}/{n_val}/{n_test}")
    return manifest.model_copy(update={"samples": samples})
