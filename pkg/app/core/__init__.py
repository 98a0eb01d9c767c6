"""Core module containing configuration, errors, logging and the model store."""

from app.core.config import settings
from app.core.errors import EngineError

__all__ = ["settings", "EngineError"]
