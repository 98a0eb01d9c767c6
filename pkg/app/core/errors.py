"""
Exception hierarchy for the segmentation engine.

Every error carries a stable machine code so the CLI can print a single
parsable line and the HTTP layer can map it to a status code.
"""


class EngineError(ValueError):
    """Base class for all engine errors."""

    code = "E_ENGINE"

    def one_line(self) -> str:
        """Format as `error[CODE]: message` on a single line."""
        message = " ".join(str(self).split())
        return f"error[{self.code}]: {message}"


class ShapeError(EngineError):
    """Tensor extents disagree with what an operation requires."""

    code = "E_SHAPE"


class ConfigError(EngineError):
    """Invalid or inconsistent configuration."""

    code = "E_CONFIG"


class TensorFileError(EngineError):
    """Base class for tensor file decoding failures."""

    code = "E_TENSORFILE"


class MalformedHeaderError(TensorFileError):
    """Tensor file header cannot be parsed or is missing its sentinel."""

    code = "E_HEADER"


class TruncatedPayloadError(TensorFileError):
    """Tensor file payload is shorter than its header declares."""

    code = "E_TRUNCATED"


class ByteLengthMismatchError(TensorFileError):
    """Tensor file payload is longer than, or not aligned to, its declared shape."""

    code = "E_LENGTH"


class DatasetError(EngineError):
    """Manifest or sample files are missing or unreadable."""

    code = "E_DATASET"


class CheckpointError(EngineError):
    """Checkpoint archive is missing, malformed, or incompatible."""

    code = "E_CHECKPOINT"


class NonFiniteError(EngineError):
    """A NaN or infinity appeared during training."""

    code = "E_NONFINITE"


class StaleTraceError(EngineError):
    """A forward trace or perceptron workspace was reused or does not match."""

    code = "E_STALE"


class GradientCheckError(EngineError):
    """An analytic gradient disagrees with finite differences."""

    code = "E_GRADCHECK"


class InternalError(EngineError):
    """Unexpected failure outside the engine's own checks."""

    code = "E_INTERNAL"
