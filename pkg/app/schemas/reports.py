"""
Pydantic schemas for reports written by the CLI.

Field names are fixed; downstream tooling parses them.
"""

from typing import Optional

from pydantic import BaseModel, Field, computed_field


class MetricsReport(BaseModel):
    """Micro-averaged segmentation metrics over evaluated pixels."""

    tp: int = Field(..., ge=0)
    fp: int = Field(..., ge=0)
    fn: int = Field(..., ge=0)
    tn: int = Field(..., ge=0)
    precision: float = Field(..., ge=0.0, le=1.0)
    recall: float = Field(..., ge=0.0, le=1.0)
    iou: float = Field(..., ge=0.0, le=1.0)
    f1: float = Field(..., ge=0.0, le=1.0)


class TrainLogRecord(BaseModel):
    """One epoch of training."""

    epoch: int = Field(..., ge=1)
    train_loss: float
    val_loss: Optional[float] = Field(None, description="None when the validation split is empty")
    precision: float
    recall: float
    iou: float
    f1: float


class GradcheckEntry(BaseModel):
    """Worst finite-difference disagreement for one component."""

    component: str
    max_rel_error: float
    threshold: float
    passed: bool


class GradcheckReport(BaseModel):
    """Outcome of the gradient suite."""

    entries: list[GradcheckEntry]

    @computed_field
    @property
    def passed(self) -> bool:
        """True when every component passed."""
        return all(e.passed for e in self.entries)


class TimingEntry(BaseModel):
    """Wall time of one benchmarked operation."""

    name: str
    seconds: float


class ParamCountEntry(BaseModel):
    """Parameter count of a shipped configuration next to its published reference."""

    name: str
    count: int
    reference: int


class BenchReport(BaseModel):
    """Timing and size report."""

    timings: list[TimingEntry]
    param_counts: list[ParamCountEntry]


class PredictionRecord(BaseModel):
    """Files written for one predicted sample, relative to the index."""

    sample_id: str
    probs_path: str
    mask_path: str


class PredictionIndex(BaseModel):
    """Contents of predictions.json."""

    split: str
    threshold: float
    samples: list[PredictionRecord] = Field(default_factory=list)
