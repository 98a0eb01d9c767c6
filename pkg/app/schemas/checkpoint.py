"""
Pydantic schema for the checkpoint manifest.

A checkpoint is an uncompressed zip archive holding `manifest.json` (this
model) and one raw little-endian float32 payload per tensor.
"""

from enum import Enum
from typing import Optional

from pydantic import BaseModel, Field

from app.schemas.config import NetworkConfig, PreprocessConfig
from app.schemas.dataset import ChannelStats

CHECKPOINT_FORMAT_VERSION = 1


class TensorKind(str, Enum):
    """Whether a stored tensor is trained or a running statistic."""

    PARAM = "param"
    BUFFER = "buffer"


class TensorEntry(BaseModel):
    """Location and shape of one stored tensor."""

    name: str
    shape: list[int]
    kind: TensorKind
    file: str = Field(..., description="Member name of the raw payload inside the archive")


class CheckpointManifest(BaseModel):
    """Table of contents of a checkpoint archive."""

    format_version: int = CHECKPOINT_FORMAT_VERSION
    dtype: str = "f32"
    byte_order: str = "little"
    network: NetworkConfig
    channel_roles: list[str] = Field(default_factory=list)
    channel_stats: Optional[ChannelStats] = None
    preprocess: Optional[PreprocessConfig] = Field(None, description="Pipeline the model was trained with")
    seed: int = Field(0, description="Seed of the per-sample preprocessing generators")
    tensors: list[TensorEntry]
