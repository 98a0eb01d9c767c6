"""
Checkpoint archive read/write.

Layout (stable across versions, format_version guards changes):
    manifest.json        CheckpointManifest as JSON
    tensors/0000.f32     raw little-endian float32 payload, row-major
    tensors/0001.f32     ...
Members are stored uncompressed with a fixed timestamp, so saving the same
model twice yields identical bytes.
"""

import logging
import zipfile
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import ValidationError

from app.core.errors import CheckpointError
from app.schemas.checkpoint import (
    CHECKPOINT_FORMAT_VERSION,
    CheckpointManifest,
    TensorEntry,
    TensorKind,
)
from app.schemas.config import PreprocessConfig
from app.schemas.dataset import ChannelStats
from app.services.network import ModelParams, build_model

logger = logging.getLogger(__name__)

MANIFEST_MEMBER = "manifest.json"
FIXED_TIMESTAMP = (1980, 1, 1, 0, 0, 0)
PAYLOAD_DTYPE = np.dtype("<f4")


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=FIXED_TIMESTAMP)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(
    path: str | Path,
    model: ModelParams,
    channel_stats: Optional[ChannelStats] = None,
    channel_roles: Optional[list[str]] = None,
    preprocess: Optional[PreprocessConfig] = None,
    seed: int = 0,
) -> None:
    """Write model parameters, running statistics and config to one archive."""
    entries: list[TensorEntry] = []
    payloads: list[tuple[str, bytes]] = []
    tables = ((TensorKind.PARAM, model.params), (TensorKind.BUFFER, model.buffers))
    for kind, table in tables:
        for name, value in table.items():
            member = f"tensors/{len(entries):04d}.f32"
            entries.append(TensorEntry(name=name, shape=list(value.shape), kind=kind, file=member))
            payloads.append((member, np.ascontiguousarray(value, dtype=PAYLOAD_DTYPE).tobytes()))

    manifest = CheckpointManifest(
        network=model.config,
        channel_roles=channel_roles or [],
        channel_stats=channel_stats,
        preprocess=preprocess,
        seed=seed,
        tensors=entries,
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as archive:
        archive.writestr(_member(MANIFEST_MEMBER), manifest.model_dump_json(indent=2))
        for member, payload in payloads:
            archive.writestr(_member(member), payload)
    logger.info(f"Saved checkpoint {path} ({len(entries)} tensors)")


def load_checkpoint(path: str | Path) -> tuple[ModelParams, CheckpointManifest]:
    """Read an archive written by save_checkpoint; tensors come back as float32."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as archive:
            manifest = CheckpointManifest.model_validate_json(archive.read(MANIFEST_MEMBER))
            if manifest.format_version != CHECKPOINT_FORMAT_VERSION:
                raise CheckpointError(
                    f"{path}: unsupported checkpoint format {manifest.format_version}"
                )
            params: dict[str, np.ndarray] = {}
            buffers: dict[str, np.ndarray] = {}
            for entry in manifest.tensors:
                raw = archive.read(entry.file)
                expected = int(np.prod(entry.shape, dtype=np.int64)) * PAYLOAD_DTYPE.itemsize
                if len(raw) != expected:
                    raise CheckpointError(
                        f"{path}: tensor {entry.name!r} has {len(raw)} bytes, expected {expected}"
                    )
                value = np.frombuffer(raw, dtype=PAYLOAD_DTYPE).reshape(entry.shape).astype(np.float32)
                (params if entry.kind == TensorKind.PARAM else buffers)[entry.name] = value
    except (zipfile.BadZipFile, KeyError, ValidationError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint ({e})") from e

    reference = build_model(manifest.network)
    for label, stored, expected_table in (
        ("parameter", params, reference.params),
        ("buffer", buffers, reference.buffers),
    ):
        expected_shapes = {name: value.shape for name, value in expected_table.items()}
        stored_shapes = {name: value.shape for name, value in stored.items()}
        if stored_shapes != expected_shapes:
            missing = sorted(set(expected_shapes) - set(stored_shapes))
            extra = sorted(set(stored_shapes) - set(expected_shapes))
            raise CheckpointError(
                f"{path}: {label} table does not match the embedded config "
                f"(missing {missing[:3]}, unexpected {extra[:3]})"
            )

    logger.info(f"Loaded checkpoint {path} ({len(params)} parameters, {len(buffers)} buffers)")
    return ModelParams(config=manifest.network, params=params, buffers=buffers), manifest
