"""
Dataset loading and batching.

Samples are read through the manifest, passed through the preprocessing
pipeline, and grouped into batches in a seeded order. Epoch order depends
only on (shuffle_seed, epoch); the final short batch is kept.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from app.core.errors import DatasetError, TensorFileError
from app.schemas.config import PreprocessConfig
from app.schemas.dataset import ChannelStats, Manifest, ManifestEntry, Split
from app.services.preprocess import (
    Sample,
    augment_flip,
    compute_channel_stats,
    normalize_channels,
    output_roles,
    transform_inputs,
)
from app.services.tensor_file import read_tensor

logger = logging.getLogger(__name__)


@dataclass
class Batch:
    """Stacked samples: inputs (B, C, N, N), targets (B, 1, N, N) with -1 kept."""

    sample_ids: list[str]
    inputs: np.ndarray
    targets: np.ndarray


def load_manifest(path: str | Path) -> tuple[Manifest, Path]:
    """Manifest plus the directory its relative paths resolve against."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    try:
        return Manifest.load(path), path.parent
    except ValueError as e:
        raise DatasetError(f"{path}: invalid manifest ({e})") from e


def load_sample(manifest: Manifest, root: Path, entry: ManifestEntry) -> Sample:
    """Read and validate one sample's tensors."""
    try:
        inputs = read_tensor(root / entry.input_path)
        target = read_tensor(root / entry.target_path)
    except FileNotFoundError as e:
        raise DatasetError(f"sample {entry.sample_id!r}: missing file {e.filename}") from e
    except TensorFileError as e:
        raise DatasetError(f"sample {entry.sample_id!r}: {e}") from e

    n = manifest.resolution
    if inputs.shape != (manifest.channels, n, n):
        raise DatasetError(
            f"sample {entry.sample_id!r}: input shape {inputs.shape} != {(manifest.channels, n, n)}"
        )
    if target.shape != (1, n, n):
        raise DatasetError(f"sample {entry.sample_id!r}: target shape {target.shape} != {(1, n, n)}")
    if not np.isin(target, (-1.0, 0.0, 1.0)).all():
        raise DatasetError(f"sample {entry.sample_id!r}: target values outside {{-1, 0, 1}}")
    return Sample(entry.sample_id, inputs, target)


def sample_rng(seed: int, index: int, epoch: Optional[int] = None) -> np.random.Generator:
    """Generator for the stochastic preprocessing of one sample."""
    key = [seed, index] if epoch is None else [seed, epoch, index]
    return np.random.default_rng(key)


def split_entries(manifest: Manifest, split: Split) -> list[ManifestEntry]:
    entries = manifest.entries(split)
    if not entries:
        raise DatasetError(f"split {split.value!r} is empty")
    return entries


def training_stats(
    manifest: Manifest, root: Path, preprocess_cfg: PreprocessConfig, seed: int
) -> ChannelStats:
    """Channel statistics over the training split, after margin cropping and smoothing."""
    roles = output_roles(manifest.channel_roles, preprocess_cfg)
    stacks = (
        transform_inputs(
            load_sample(manifest, root, entry).inputs,
            manifest.channel_roles,
            preprocess_cfg,
            sample_rng(seed, index),
        )
        for index, entry in enumerate(split_entries(manifest, Split.TRAIN))
    )
    return compute_channel_stats(stacks, roles)


def prepare_sample(
    sample: Sample,
    roles: list[str],
    preprocess_cfg: PreprocessConfig,
    rng: np.random.Generator,
    stats: Optional[ChannelStats],
    augment: bool,
) -> Sample:
    """Margin crop, smoothing, optional flips, then normalization."""
    inputs = transform_inputs(sample.inputs, roles, preprocess_cfg, rng)
    prepared = Sample(sample.sample_id, inputs, sample.target.astype(np.float32))
    if augment and preprocess_cfg.flips:
        prepared = augment_flip(prepared, rng)
    if preprocess_cfg.normalize and stats is not None:
        prepared = Sample(prepared.sample_id, normalize_channels(prepared.inputs, stats), prepared.target)
    return prepared


def load_batches(
    manifest: Manifest,
    root: Path,
    split: Split,
    batch_size: int,
    shuffle_seed: int,
    preprocess_cfg: PreprocessConfig,
    epoch: int = 0,
    stats: Optional[ChannelStats] = None,
    shuffle: bool = True,
    augment: Optional[bool] = None,
) -> Iterator[Batch]:
    """
    Yield batches of one split.

    Training batches (augment defaults to split == train) draw preprocessing
    randomness from (shuffle_seed, epoch, index); other splits from
    (shuffle_seed, index) so evaluation inputs are identical every epoch.
    """
    if batch_size < 1:
        raise DatasetError(f"batch_size must be positive, got {batch_size}")
    entries = split_entries(manifest, split)
    augment = split == Split.TRAIN if augment is None else augment
    order = np.arange(len(entries))
    if shuffle:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(entries))

    for start in range(0, len(order), batch_size):
        samples = []
        for index in order[start : start + batch_size]:
            rng = sample_rng(shuffle_seed, int(index), epoch if augment else None)
            raw = load_sample(manifest, root, entries[index])
            samples.append(
                prepare_sample(raw, manifest.channel_roles, preprocess_cfg, rng, stats, augment)
            )
        yield Batch(
            sample_ids=[s.sample_id for s in samples],
            inputs=np.stack([s.inputs for s in samples]),
            targets=np.stack([s.target for s in samples]),
        )
