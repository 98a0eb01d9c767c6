"""
FastAPI application entry point.

This module initializes the FastAPI app, configures middleware (CORS),
and registers routers.
"""

import logging

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.core.config import settings
from app.core.errors import CheckpointError
from app.core.log_setup import configure_logging
from app.core.model_store import init_model_store
from app.routers import inference, metrics, models

logger = logging.getLogger(__name__)

# Initialize FastAPI application
app = FastAPI(
    title="Wildfire Segmentation API",
    description="Next-day fire mask prediction with transform-domain UNets",
    version="1.0.0",
)


@app.on_event("startup")
async def startup():
    """Load the configured checkpoint on startup if available."""
    configure_logging()
    try:
        loaded = init_model_store()
        logger.info(f"Serving {loaded.model.config.branches.value} network from {loaded.path}")
    except CheckpointError as e:
        logger.warning(f"No model loaded: {e}. Prediction will be unavailable.")


# Configure CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.cors_origins,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


# Root endpoint
@app.get("/")
async def root():
    """
    Root endpoint to verify the service is running.

    Returns:
        dict: Status message
    """
    return {"status": "Wildfire segmentation service running"}


# Register routers with /api prefix
app.include_router(models.router, prefix="/api")
app.include_router(inference.router, prefix="/api")
app.include_router(metrics.router, prefix="/api")


if __name__ == "__main__":
    import uvicorn

    uvicorn.run(
        "app.main:app",
        host=settings.host,
        port=settings.port,
        reload=settings.env == "development",
    )
