"""
Pydantic schemas for run configuration.

Defines the network, loss, optimizer, preprocessing, and synthetic data
sections of the JSON run config, and the RunConfig that ties them together.
"""

from enum import Enum
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, Field, field_validator, model_validator


def is_power_of_two(n: int) -> bool:
    """True when n is a positive power of two."""
    return n > 0 and (n & (n - 1)) == 0


class Branches(str, Enum):
    """Transform branches of the network."""

    HT_ONLY = "ht"
    HT_DCT = "ht+dct"


class NetworkConfig(BaseModel):
    """Architecture of HT-UNet / TD-FusionUNet."""

    branches: Branches = Field(Branches.HT_ONLY, description="ht (HT-UNet) or ht+dct (TD-FusionUNet)")
    base_width: int = Field(8, ge=1, description="Channel width B of the first encoder stage")
    in_channels: int = Field(12, ge=1, description="Input channel count")
    in_size: int = Field(64, description="Input height and width N (power of two, divisible by 8)")
    stem_kernel: int = Field(4, ge=2, description="Filter size of the first conv and the transposed head")
    interior_kernel: int = Field(7, ge=1, description="Filter size of every interior conv (odd)")
    mask_threshold: float = Field(0.5, gt=0.0, lt=1.0, description="Probability threshold for the binary mask")
    out_channels: int = Field(1, ge=1, le=2, description="Head channels; 2 enables the unverified both-days head")
    use_perceptrons: bool = Field(True, description="False builds the perceptron-free ablation")
    init_seed: int = Field(0, description="Parameter initialisation seed")

    class Config:
        """Pydantic configuration."""

        extra = "forbid"

    @field_validator("in_size")
    @classmethod
    def validate_in_size(cls, v: int) -> int:
        """Require a power of two that survives three halvings."""
        if not is_power_of_two(v) or v < 8:
            raise ValueError(f"in_size must be a power of two >= 8, got {v}")
        return v

    @field_validator("stem_kernel")
    @classmethod
    def validate_stem_kernel(cls, v: int) -> int:
        """Stride-2 stem with padding k/2 - 1 halves extents only for even k."""
        if v % 2:
            raise ValueError(f"stem_kernel must be even, got {v}")
        return v

    @field_validator("interior_kernel")
    @classmethod
    def validate_interior_kernel(cls, v: int) -> int:
        """Same-padding needs an odd interior filter."""
        if v % 2 == 0:
            raise ValueError(f"interior_kernel must be odd, got {v}")
        return v


class LossWeights(BaseModel):
    """Weights and hyperparameters of the composite loss."""

    lambda_bce: float = Field(0.4, ge=0.0)
    lambda_dice: float = Field(0.3, ge=0.0)
    lambda_focal: float = Field(0.3, ge=0.0)
    focal_gamma: float = Field(2.0, ge=0.0)
    focal_alpha: float = Field(0.25, ge=0.0, le=1.0)
    dice_smooth: float = Field(1.0, gt=0.0)
    pos_weight_cap: float = Field(100.0, ge=1.0, description="Upper clamp of the per-batch BCE positive weight")

    class Config:
        """Pydantic configuration."""

        extra = "forbid"


class OptimizerConfig(BaseModel):
    """Adam hyperparameters."""

    lr: float = Field(1e-4, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)

    class Config:
        """Pydantic configuration."""

        extra = "forbid"


class SmoothingConfig(BaseModel):
    """Gaussian-mixture smoothing scales."""

    sigmas: list[float] = Field(default_factory=lambda: [0.4, 0.8], min_length=1)

    @field_validator("sigmas")
    @classmethod
    def validate_sigmas(cls, v: list[float]) -> list[float]:
        """Every scale must be positive."""
        if any(s <= 0 for s in v):
            raise ValueError(f"smoothing sigmas must be positive, got {v}")
        return v


class MarginConfig(BaseModel):
    """Value ranges for random margin cropping."""

    background_range: tuple[float, float] = (0.01, 0.03)
    fire_range: tuple[float, float] = (0.8, 0.99)
    seed: int = 0

    @model_validator(mode="after")
    def validate_ranges(self) -> "MarginConfig":
        """Ranges must lie inside (0, 1), be ordered, and not overlap."""
        for lo, hi in (self.background_range, self.fire_range):
            if not 0.0 < lo < hi < 1.0:
                raise ValueError(f"margin range ({lo}, {hi}) must satisfy 0 < lo < hi < 1")
        if self.background_range[1] >= self.fire_range[0]:
            raise ValueError("background range must lie below the fire range")
        return self


class PreprocessConfig(BaseModel):
    """Toggles of the preprocessing pipeline."""

    margin_crop: bool = True
    margin: MarginConfig = Field(default_factory=MarginConfig)
    smoothing_sigmas: list[float] = Field(default_factory=lambda: [0.4, 0.8])
    smooth_roles: list[str] = Field(default_factory=lambda: ["prefire_mask", "wind_x", "wind_y"])
    append_smoothed: bool = False
    flips: bool = True
    normalize: bool = True

    class Config:
        """Pydantic configuration."""

        extra = "forbid"

    @field_validator("smoothing_sigmas")
    @classmethod
    def validate_sigmas(cls, v: list[float]) -> list[float]:
        """Every scale must be positive; an empty list disables smoothing."""
        if any(s <= 0 for s in v):
            raise ValueError(f"smoothing sigmas must be positive, got {v}")
        return v

    @property
    def smoothing(self) -> Optional[SmoothingConfig]:
        """SmoothingConfig view, or None when smoothing is off."""
        return SmoothingConfig(sigmas=self.smoothing_sigmas) if self.smoothing_sigmas else None


class SynthConfig(BaseModel):
    """Synthetic wildfire-spread dataset generator settings."""

    count: int = Field(32, ge=1)
    resolution: int = Field(64)
    channel_roles: list[str] = Field(
        default_factory=lambda: ["prefire_mask", "wind_x", "wind_y", "elevation"]
    )
    seed: int = 0
    wind_bias: float = Field(1.0, ge=0.0, description="Pixels of downwind drift per growth step")
    growth_steps: int = Field(3, ge=0)
    uncertain_fraction: float = Field(0.02, ge=0.0, lt=1.0)

    class Config:
        """Pydantic configuration."""

        extra = "forbid"

    @field_validator("resolution")
    @classmethod
    def validate_resolution(cls, v: int) -> int:
        """Resolution must be a power of two."""
        if not is_power_of_two(v):
            raise ValueError(f"resolution must be a power of two, got {v}")
        return v

    @field_validator("channel_roles")
    @classmethod
    def validate_roles(cls, v: list[str]) -> list[str]:
        """The pre-fire mask is mandatory and roles are unique."""
        if "prefire_mask" not in v:
            raise ValueError("channel_roles must include prefire_mask")
        if len(set(v)) != len(v):
            raise ValueError(f"channel_roles must be unique, got {v}")
        return v


class RunConfig(BaseModel):
    """Top-level run configuration read from --config."""

    network: NetworkConfig = Field(default_factory=NetworkConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    epochs: int = Field(100, ge=1)
    batch_size: int = Field(8, ge=1)
    seed: int = 0
    max_steps: Optional[int] = Field(None, ge=1, description="Stop after this many optimizer steps")
    manifest_path: str = "data/manifest.json"
    out_dir: str = "runs/default"

    class Config:
        """Pydantic configuration."""

        extra = "forbid"

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        """Load and validate a JSON run config."""
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))

    def write(self, path: str | Path) -> None:
        """Write the effective config with every default resolved."""
        Path(path).write_text(self.model_dump_json(indent=2) + "\n", encoding="utf-8")
