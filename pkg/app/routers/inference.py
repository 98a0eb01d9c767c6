"""
Inference router running the loaded checkpoint.
"""

import logging

import numpy as np
from fastapi import APIRouter, HTTPException, status

from app.core.errors import CheckpointError, EngineError
from app.core.model_store import get_loaded_model
from app.schemas.api import PredictRequest, PredictResponse
from app.services.network import predict_mask
from app.services.trainer import predict_stack

logger = logging.getLogger(__name__)
router = APIRouter(tags=["inference"])


@router.post(
    "/predict",
    response_model=PredictResponse,
    status_code=status.HTTP_200_OK,
    summary="Predict Next-Day Fire Mask",
)
def predict(request: PredictRequest):
    """
    Run the loaded network on one raw input stack.

    The stack is preprocessed with the pipeline and statistics stored in the
    checkpoint, then evaluated with eval-mode batchnorm.

    Returns:
        PredictResponse with probabilities and the thresholded mask

    Raises:
        HTTPException: 503 if no checkpoint is loaded, 422 if the input does not fit it
    """
    try:
        loaded = get_loaded_model()
    except CheckpointError as e:
        logger.warning(f"Prediction requested without a usable checkpoint: {e}")
        raise HTTPException(status_code=status.HTTP_503_SERVICE_UNAVAILABLE, detail=e.one_line())

    try:
        inputs = np.asarray(request.inputs, dtype=np.float32)
        probs = predict_stack(loaded.model, loaded.manifest, inputs)
    except EngineError as e:
        raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=e.one_line())
    except ValueError as e:
        raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=str(e))

    threshold = request.threshold or loaded.model.config.mask_threshold
    return PredictResponse(
        probabilities=probs.astype(np.float64).tolist(),
        mask=predict_mask(probs, threshold).tolist(),
        threshold=threshold,
    )
