"""
Pydantic schemas for dataset manifests and channel statistics.

The manifest is a JSON file; sample paths are relative to its directory.
"""

from enum import Enum
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, Field, model_validator

MANIFEST_VERSION = 1


class Split(str, Enum):
    """Dataset split labels."""

    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class ManifestEntry(BaseModel):
    """One (input stack, target mask) pair."""

    sample_id: str = Field(..., min_length=1)
    input_path: str = Field(..., description="C x N x N tensor file, relative to the manifest")
    target_path: str = Field(..., description="1 x N x N tensor file with values in {-1, 0, 1}")
    split: Optional[Split] = Field(None, description="Assigned by split_dataset")


class Manifest(BaseModel):
    """Dataset index."""

    version: int = Field(MANIFEST_VERSION)
    channel_roles: list[str] = Field(..., min_length=1)
    channels: int = Field(..., ge=1)
    resolution: int = Field(..., ge=1)
    samples: list[ManifestEntry] = Field(default_factory=list)

    @model_validator(mode="after")
    def validate_roles(self) -> "Manifest":
        """Role list must name every channel exactly once."""
        if len(self.channel_roles) != self.channels:
            raise ValueError(
                f"channel_roles has {len(self.channel_roles)} entries but channels = {self.channels}"
            )
        if self.version != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {self.version}")
        return self

    def entries(self, split: Optional[Split] = None) -> list[ManifestEntry]:
        """Samples of one split, in manifest order (all samples when split is None)."""
        if split is None:
            return list(self.samples)
        return [s for s in self.samples if s.split == split]

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        """Read a manifest JSON file."""
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))

    def save(self, path: str | Path) -> None:
        """Write the manifest as indented JSON."""
        Path(path).write_text(self.model_dump_json(indent=2) + "\n", encoding="utf-8")


class ChannelStats(BaseModel):
    """Per-channel normalization statistics from the training split."""

    mean: list[float]
    std: list[float]
    exempt: list[bool]

    @model_validator(mode="after")
    def validate_lengths(self) -> "ChannelStats":
        """All three lists describe the same channels."""
        if not len(self.mean) == len(self.std) == len(self.exempt):
            raise ValueError("mean, std and exempt must have equal length")
        return self
