"""
Metrics router for evaluating binary fire masks.

Derives micro-averaged precision, recall, IoU and F1.
"""

import logging

import numpy as np
from fastapi import APIRouter, HTTPException, status

from app.core.errors import EngineError
from app.schemas.api import F1Request, F1Response, MetricsRequest
from app.schemas.reports import MetricsReport
from app.services.evaluation import confusion_counts, derive_metrics, f1_score

logger = logging.getLogger(__name__)
router = APIRouter(prefix="/metrics", tags=["metrics"])


@router.post(
    "",
    response_model=MetricsReport,
    status_code=status.HTTP_200_OK,
    summary="Evaluate Prediction",
)
def evaluate(request: MetricsRequest):
    """
    Confusion counts and derived metrics of one prediction/target pair.

    Pixels whose target is -1 are excluded.

    Raises:
        HTTPException: 422 if the two masks differ in shape
    """
    try:
        counts = confusion_counts(
            np.asarray(request.prediction, dtype=np.float32), np.asarray(request.target, dtype=np.float32)
        )
    except EngineError as e:
        raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=e.one_line())
    except ValueError as e:
        # ragged rows
        raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=str(e))
    return derive_metrics(counts)


@router.post("/f1", response_model=F1Response, status_code=status.HTTP_200_OK, summary="F1 Score")
def f1(request: F1Request):
    """Harmonic mean of precision and recall."""
    return F1Response(
        precision=request.precision, recall=request.recall, f1=f1_score(request.precision, request.recall)
    )
