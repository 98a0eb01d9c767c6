"""
Checkpoint store for the HTTP service.

Holds the network loaded from settings.checkpoint_path as a lazily
initialised singleton.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from app.core.config import settings
from app.core.errors import CheckpointError
from app.schemas.checkpoint import CheckpointManifest
from app.services.checkpoint import load_checkpoint
from app.services.network import ModelParams

logger = logging.getLogger(__name__)


@dataclass
class LoadedModel:
    """A network and the manifest it was stored with."""

    path: Path
    model: ModelParams
    manifest: CheckpointManifest


def _resolve_checkpoint_path(path: Optional[str] = None) -> Path:
    """
    Validate that a checkpoint path is configured.

    Raises:
        CheckpointError: If no path is set
    """
    resolved = path or settings.checkpoint_path
    if not resolved:
        raise CheckpointError("no checkpoint configured; set CHECKPOINT_PATH in your .env file")
    return Path(resolved)


# Lazy-loaded singleton (initialized on first use)
_loaded: Optional[LoadedModel] = None


def init_model_store(path: Optional[str] = None) -> LoadedModel:
    """
    Load the singleton checkpoint.

    Call this during application startup for eager loading and early
    validation of the configured path.

    Raises:
        CheckpointError: If the checkpoint is missing or malformed
    """
    global _loaded
    if _loaded is None or path is not None:
        resolved = _resolve_checkpoint_path(path)
        model, manifest = load_checkpoint(resolved)
        _loaded = LoadedModel(path=resolved, model=model, manifest=manifest)
    return _loaded


def get_loaded_model() -> LoadedModel:
    """The loaded checkpoint, loading it on first use."""
    return init_model_store()


def reset_model_store() -> None:
    """Forget the loaded checkpoint."""
    global _loaded
    _loaded = None
