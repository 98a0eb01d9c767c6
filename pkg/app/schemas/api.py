"""
Pydantic schemas for the HTTP endpoints.

Defines request and response models for inference and metrics.
"""

from pydantic import BaseModel, Field, model_validator

from app.schemas.reports import ParamCountEntry


class PredictRequest(BaseModel):
    """Request model for running the loaded network on one input stack."""

    inputs: list[list[list[float]]] = Field(..., description="Raw C x N x N input stack")
    threshold: float | None = Field(
        None, gt=0.0, lt=1.0, description="Mask threshold (defaults to the checkpoint's)"
    )


class PredictResponse(BaseModel):
    """Response model with the probability map and the binary mask."""

    probabilities: list[list[list[float]]] = Field(..., description="out_channels x N x N")
    mask: list[list[list[int]]] = Field(..., description="1 where probability > threshold")
    threshold: float


class MetricsRequest(BaseModel):
    """Request model for metrics of one prediction/target pair."""

    prediction: list[list[float]] = Field(..., description="Binary H x W mask")
    target: list[list[float]] = Field(..., description="H x W target with values in {-1, 0, 1}")

    @model_validator(mode="after")
    def validate_target(self) -> "MetricsRequest":
        """Targets use the {-1, 0, 1} alphabet."""
        if any(v not in (-1.0, 0.0, 1.0) for row in self.target for v in row):
            raise ValueError("target values must be -1, 0 or 1")
        return self


class F1Request(BaseModel):
    """Request model for F1 from precision and recall."""

    precision: float = Field(..., ge=0.0, le=1.0)
    recall: float = Field(..., ge=0.0, le=1.0)


class F1Response(BaseModel):
    """Response model for the F1 score."""

    precision: float
    recall: float
    f1: float


class ParamCountsResponse(BaseModel):
    """Response model listing shipped configurations and their sizes."""

    configs: list[ParamCountEntry]
