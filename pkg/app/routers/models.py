"""
Models router for network metadata.

Provides parameter counts of the shipped configurations.
"""

import logging

from fastapi import APIRouter, status

from app.schemas.api import ParamCountsResponse
from app.services.bench import reference_param_counts

logger = logging.getLogger(__name__)
router = APIRouter(prefix="/models", tags=["models"])


@router.get(
    "/param-counts",
    response_model=ParamCountsResponse,
    status_code=status.HTTP_200_OK,
    summary="Get Parameter Counts",
)
def get_param_counts():
    """
    Parameter counts of the shipped multi-day configurations.

    Returns:
        ParamCountsResponse with each configuration's count and published reference
    """
    return ParamCountsResponse(configs=reference_param_counts())
