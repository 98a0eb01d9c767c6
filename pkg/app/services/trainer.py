"""
Training, prediction and evaluation back-ends of the CLI.

Training runs the composite loss under Adam, projects perceptron thresholds
after every step, evaluates the validation split after every epoch and keeps
the parameters with the best validation F1 (earliest epoch on ties).
"""

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Optional

import numpy as np

from app.core.errors import ConfigError, DatasetError, NonFiniteError, ShapeError
from app.schemas.checkpoint import CheckpointManifest
from app.schemas.config import LossWeights, PreprocessConfig, RunConfig
from app.schemas.dataset import ChannelStats, Manifest, Split
from app.schemas.reports import MetricsReport, PredictionIndex, PredictionRecord, TrainLogRecord
from app.services.checkpoint import load_checkpoint, save_checkpoint
from app.services.dataset import (
    Batch,
    load_batches,
    load_manifest,
    load_sample,
    sample_rng,
    training_stats,
)
from app.services.evaluation import (
    ConfusionCounts,
    confusion_counts,
    derive_metrics,
    render_confusion_image,
    write_ppm,
)
from app.services.losses import composite_loss
from app.services.network import ModelParams, backward, build_model, forward, predict_mask
from app.services.preprocess import SMOOTHED_SUFFIX, normalize_channels, output_roles, transform_inputs
from app.services.tensor_file import read_tensor, write_tensor
from app.services.tensor_ops import AdamState, adam_step

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.ckpt"
CONFIG_NAME = "config.json"
TRAIN_LOG_NAME = "train_log.jsonl"
TIMING_LOG_NAME = "train_timing.jsonl"
METRICS_NAME = "metrics.json"
PREDICTIONS_NAME = "predictions.json"
PREFIRE_ROLE = "prefire_mask"
# Head channel compared against the next-day target
NEXT_DAY_CHANNEL = 0


@dataclass
class TrainResult:
    """Summary of a finished training run."""

    out_dir: Path
    records: list[TrainLogRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_f1: float = -1.0
    steps: int = 0
    model: Optional[ModelParams] = None


def first_non_finite(tensors: Mapping[str, np.ndarray]) -> Optional[str]:
    """Name of the first tensor, in mapping order, holding a NaN or infinity."""
    for name, value in tensors.items():
        if not np.all(np.isfinite(value)):
            return name
    return None


def check_compatible(model: ModelParams, manifest: Manifest, preprocess_cfg: PreprocessConfig) -> None:
    """The network must accept the stacks the dataset produces after preprocessing."""
    roles = output_roles(manifest.channel_roles, preprocess_cfg)
    cfg = model.config
    if cfg.in_channels != len(roles):
        raise ConfigError(
            f"network expects {cfg.in_channels} input channels, dataset provides {len(roles)} ({roles})"
        )
    if cfg.in_size != manifest.resolution:
        raise ConfigError(f"network expects N={cfg.in_size}, dataset resolution is {manifest.resolution}")


def loss_targets(batch: Batch, roles: list[str], out_channels: int) -> np.ndarray:
    """
    Training targets with uncertain pixels mapped to 0.

    A two-channel head is trained on (next-day mask, pre-fire mask).
    """
    next_day = np.maximum(batch.targets, 0.0).astype(np.float32)
    if out_channels == 1:
        return next_day
    if PREFIRE_ROLE not in roles:
        raise ConfigError("a two-channel head needs a prefire_mask input channel")
    prefire = (batch.inputs[:, roles.index(PREFIRE_ROLE)] > 0.5).astype(np.float32)
    return np.concatenate([next_day, prefire[:, None]], axis=1)


def _batch_stream(
    manifest: Manifest,
    root: Path,
    split: Split,
    batch_size: int,
    seed: int,
    preprocess_cfg: PreprocessConfig,
    stats: Optional[ChannelStats],
) -> Iterator[Batch]:
    return load_batches(
        manifest,
        root,
        split,
        batch_size,
        seed,
        preprocess_cfg,
        stats=stats,
        shuffle=False,
        augment=False,
    )


def evaluate_model(
    model: ModelParams,
    manifest: Manifest,
    root: Path,
    split: Split,
    preprocess_cfg: PreprocessConfig,
    stats: Optional[ChannelStats],
    seed: int,
    batch_size: int,
    loss_weights: Optional[LossWeights] = None,
) -> tuple[MetricsReport, Optional[float]]:
    """
    Eval-mode metrics over one split, plus the mean batch loss when weights are given.

    Args:
        model: Network parameters.
        manifest: Dataset index.
        root: Directory the manifest paths resolve against.
        split: Split to evaluate.
        preprocess_cfg: Pipeline applied to every input stack.
        stats: Training-split channel statistics, or None.
        seed: Seed of the per-sample preprocessing generators.
        batch_size: Samples per forward call.
        loss_weights: Composite loss weights; None skips the loss.

    Returns:
        Tuple of (metrics, mean loss or None)
    """
    counts = ConfusionCounts()
    losses = []
    roles = output_roles(manifest.channel_roles, preprocess_cfg)
    for batch in _batch_stream(manifest, root, split, batch_size, seed, preprocess_cfg, stats):
        probs, _ = forward(model, batch.inputs, "eval")
        if loss_weights is not None:
            loss, _ = composite_loss(probs, loss_targets(batch, roles, model.config.out_channels), loss_weights)
            losses.append(loss)
        mask = predict_mask(probs[:, NEXT_DAY_CHANNEL], model.config.mask_threshold)
        counts = counts + confusion_counts(mask, batch.targets[:, 0])
    mean_loss = float(np.mean(losses)) if losses else None
    return derive_metrics(counts), mean_loss


def _train_step(
    model: ModelParams, batch: Batch, roles: list[str], cfg: RunConfig, adam: AdamState
) -> float:
    probs, trace = forward(model, batch.inputs, "train")
    loss, grad = composite_loss(probs, loss_targets(batch, roles, model.config.out_channels), cfg.loss)
    if not math.isfinite(loss):
        culprit = first_non_finite({"inputs": batch.inputs, **model.params, "probs": probs}) or "loss"
        raise NonFiniteError(f"non-finite loss at step {adam.step_count + 1}; first non-finite tensor: {culprit}")

    grads = backward(model, trace, grad)
    culprit = first_non_finite({f"grad[{name}]": g for name, g in grads.items()})
    if culprit is not None:
        raise NonFiniteError(f"non-finite gradient at step {adam.step_count + 1}: {culprit}")

    adam_step(model.params, grads, adam)
    model.project_thresholds()
    culprit = first_non_finite({**model.params, **model.buffers})
    if culprit is not None:
        raise NonFiniteError(f"non-finite parameter after step {adam.step_count}: {culprit}")
    return loss


def train(cfg: RunConfig) -> TrainResult:
    """
    Train a network from a run config.

    Writes config.json, train_log.jsonl, train_timing.jsonl and model.ckpt
    under cfg.out_dir.

    Returns:
        TrainResult with the per-epoch records and the selected epoch

    Raises:
        DatasetError: If the manifest or the training split is unusable
        ConfigError: If the network does not fit the dataset
        NonFiniteError: If a NaN or infinity appears during training
    """
    manifest, root = load_manifest(cfg.manifest_path)
    roles = output_roles(manifest.channel_roles, cfg.preprocess)
    model = build_model(cfg.network)
    check_compatible(model, manifest, cfg.preprocess)
    stats = training_stats(manifest, root, cfg.preprocess, cfg.seed) if cfg.preprocess.normalize else None
    has_val = bool(manifest.entries(Split.VAL))
    if not has_val:
        logger.warning("Validation split is empty; keeping the parameters of the last epoch")

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(out_dir / CONFIG_NAME)
    result = TrainResult(out_dir=out_dir)
    adam = AdamState(
        lr=cfg.optimizer.lr, beta1=cfg.optimizer.beta1, beta2=cfg.optimizer.beta2, eps=cfg.optimizer.eps
    )

    def save() -> None:
        save_checkpoint(
            out_dir / CHECKPOINT_NAME,
            model,
            channel_stats=stats,
            channel_roles=roles,
            preprocess=cfg.preprocess,
            seed=cfg.seed,
        )

    with open(out_dir / TRAIN_LOG_NAME, "w", encoding="utf-8") as log_file, open(
        out_dir / TIMING_LOG_NAME, "w", encoding="utf-8"
    ) as timing_file:
        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            losses = []
            for batch in load_batches(
                manifest, root, Split.TRAIN, cfg.batch_size, cfg.seed, cfg.preprocess, epoch=epoch, stats=stats
            ):
                losses.append(_train_step(model, batch, roles, cfg, adam))
                result.steps += 1
                if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                    break

            if has_val:
                metrics, val_loss = evaluate_model(
                    model, manifest, root, Split.VAL, cfg.preprocess, stats, cfg.seed, cfg.batch_size, cfg.loss
                )
            else:
                metrics, val_loss = derive_metrics(ConfusionCounts()), None

            record = TrainLogRecord(
                epoch=epoch,
                train_loss=float(np.mean(losses)),
                val_loss=val_loss,
                precision=metrics.precision,
                recall=metrics.recall,
                iou=metrics.iou,
                f1=metrics.f1,
            )
            result.records.append(record)
            log_file.write(record.model_dump_json() + "\n")
            elapsed = time.perf_counter() - started
            timing_file.write(json.dumps({"epoch": epoch, "seconds": elapsed}) + "\n")

            if not has_val or metrics.f1 > result.best_f1:
                result.best_epoch, result.best_f1 = epoch, metrics.f1
                save()
            logger.info(
                f"Epoch {epoch}/{cfg.epochs}: train_loss={record.train_loss:.5f} "
                f"val_loss={val_loss if val_loss is None else round(val_loss, 5)} "
                f"f1={metrics.f1:.4f} ({elapsed:.2f}s)"
            )
            if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                logger.info(f"Reached max_steps={cfg.max_steps} after epoch {epoch}")
                break

    result.model = model
    logger.info(f"Best epoch {result.best_epoch} (val F1 {result.best_f1:.4f}); checkpoint in {out_dir}")
    return result


def _load_for_inference(
    checkpoint_path: str | Path, manifest: Manifest, fallback: PreprocessConfig
) -> tuple[ModelParams, CheckpointManifest, PreprocessConfig]:
    model, info = load_checkpoint(checkpoint_path)
    preprocess_cfg = info.preprocess or fallback
    check_compatible(model, manifest, preprocess_cfg)
    return model, info, preprocess_cfg


def predict_split(
    checkpoint_path: str | Path,
    manifest_path: str | Path,
    split: Split,
    out_dir: str | Path,
    batch_size: int = 8,
    fallback_preprocess: Optional[PreprocessConfig] = None,
) -> PredictionIndex:
    """
    Write `<id>.probs.tdt`, `<id>.mask.tdt` and predictions.json for one split.

    Batchnorm runs in eval mode and preprocessing uses the checkpoint's
    pipeline and seed, so reruns are bit-identical.
    """
    manifest, root = load_manifest(manifest_path)
    model, info, preprocess_cfg = _load_for_inference(
        checkpoint_path, manifest, fallback_preprocess or PreprocessConfig()
    )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    threshold = model.config.mask_threshold
    index = PredictionIndex(split=split.value, threshold=threshold)

    for batch in _batch_stream(manifest, root, split, batch_size, info.seed, preprocess_cfg, info.channel_stats):
        probs, _ = forward(model, batch.inputs, "eval")
        masks = predict_mask(probs, threshold)
        for i, sample_id in enumerate(batch.sample_ids):
            record = PredictionRecord(
                sample_id=sample_id, probs_path=f"{sample_id}.probs.tdt", mask_path=f"{sample_id}.mask.tdt"
            )
            write_tensor(out_dir / record.probs_path, probs[i])
            write_tensor(out_dir / record.mask_path, masks[i].astype(np.float32))
            index.samples.append(record)

    (out_dir / PREDICTIONS_NAME).write_text(index.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote {len(index.samples)} {split.value} predictions to {out_dir}")
    return index


def _background(manifest: Manifest, root: Path, sample_id: str) -> Optional[np.ndarray]:
    """Raw pre-fire channel of a sample, used as the TN background of renders."""
    if PREFIRE_ROLE not in manifest.channel_roles:
        return None
    entry = next(e for e in manifest.samples if e.sample_id == sample_id)
    inputs = load_sample(manifest, root, entry).inputs
    return inputs[manifest.channel_roles.index(PREFIRE_ROLE)]


def _write_metrics(report: MetricsReport, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / METRICS_NAME).write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")


def evaluate_predictions(
    predictions_path: str | Path,
    manifest_path: str | Path,
    split: Split,
    out_dir: str | Path,
    render: bool = False,
) -> MetricsReport:
    """Metrics of stored masks against the manifest targets of one split."""
    manifest, root = load_manifest(manifest_path)
    predictions_path = Path(predictions_path)
    if not predictions_path.is_file():
        raise DatasetError(f"predictions not found: {predictions_path}")
    index = PredictionIndex.model_validate_json(predictions_path.read_text(encoding="utf-8"))
    stored = {record.sample_id: record for record in index.samples}

    out_dir = Path(out_dir)
    counts = ConfusionCounts()
    for entry in manifest.entries(split):
        record = stored.get(entry.sample_id)
        if record is None:
            raise DatasetError(f"missing prediction for sample {entry.sample_id!r} in {predictions_path}")
        try:
            mask = read_tensor(predictions_path.parent / record.mask_path)[NEXT_DAY_CHANNEL]
        except FileNotFoundError as e:
            raise DatasetError(f"sample {entry.sample_id!r}: missing prediction file {e.filename}") from e
        target = load_sample(manifest, root, entry).target[0]
        counts = counts + confusion_counts(mask, target)
        if render:
            image = render_confusion_image(mask, target, _background(manifest, root, entry.sample_id))
            write_ppm(out_dir / f"{entry.sample_id}.ppm", image)

    report = derive_metrics(counts)
    _write_metrics(report, out_dir)
    logger.info(f"Evaluated {split.value} predictions from {predictions_path}: F1={report.f1:.4f}")
    return report


def evaluate_checkpoint(
    checkpoint_path: str | Path,
    manifest_path: str | Path,
    split: Split,
    out_dir: str | Path,
    batch_size: int = 8,
    render: bool = False,
    fallback_preprocess: Optional[PreprocessConfig] = None,
) -> MetricsReport:
    """Run a checkpoint over one split and report its metrics."""
    manifest, root = load_manifest(manifest_path)
    model, info, preprocess_cfg = _load_for_inference(
        checkpoint_path, manifest, fallback_preprocess or PreprocessConfig()
    )
    out_dir = Path(out_dir)
    counts = ConfusionCounts()
    stream = _batch_stream(manifest, root, split, batch_size, info.seed, preprocess_cfg, info.channel_stats)
    for batch in stream:
        probs, _ = forward(model, batch.inputs, "eval")
        masks = predict_mask(probs[:, NEXT_DAY_CHANNEL], model.config.mask_threshold)
        for i, sample_id in enumerate(batch.sample_ids):
            target = batch.targets[i, 0]
            counts = counts + confusion_counts(masks[i], target)
            if render:
                image = render_confusion_image(masks[i], target, _background(manifest, root, sample_id))
                write_ppm(out_dir / f"{sample_id}.ppm", image)

    report = derive_metrics(counts)
    _write_metrics(report, out_dir)
    logger.info(f"Evaluated {checkpoint_path} on {split.value}: F1={report.f1:.4f}")
    return report


def predict_stack(model: ModelParams, info: CheckpointManifest, inputs: np.ndarray) -> np.ndarray:
    """
    Probabilities (out_channels, N, N) for one raw (C, N, N) stack.

    The stack goes through the checkpoint's pipeline with the generator of
    sample index 0, then its normalization statistics.
    """
    preprocess_cfg = info.preprocess or PreprocessConfig()
    raw_roles = [r for r in info.channel_roles if not r.endswith(SMOOTHED_SUFFIX)]
    n = model.config.in_size
    if inputs.shape != (len(raw_roles), n, n):
        raise ShapeError(f"input must be ({len(raw_roles)}, {n}, {n}) for roles {raw_roles}, got {inputs.shape}")
    stack = transform_inputs(inputs, raw_roles, preprocess_cfg, sample_rng(info.seed, 0))
    if preprocess_cfg.normalize and info.channel_stats is not None:
        stack = normalize_channels(stack, info.channel_stats)
    probs, _ = forward(model, stack[None], "eval")
    return probs[0]
