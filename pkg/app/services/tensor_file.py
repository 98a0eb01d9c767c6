"""
Bespoke tensor file format.

    {"byte_order":"little","dtype":"f32","shape":[C,H,W]}\\n\\x1e<payload>

The header is compact JSON with sorted keys, terminated by a newline and the
record-separator sentinel byte 0x1E. The payload is row-major little-endian
float32, exactly 4 * prod(shape) bytes. Reading back is bit-exact and never
reshapes.
"""

import json
from pathlib import Path

import numpy as np

from app.core.errors import ByteLengthMismatchError, MalformedHeaderError, TruncatedPayloadError

HEADER_TERMINATOR = b"\n\x1e"
PAYLOAD_DTYPE = np.dtype("<f4")
MAX_HEADER_BYTES = 4096


def encode_tensor(tensor: np.ndarray) -> bytes:
    """Header plus payload bytes of a float tensor."""
    header = {"byte_order": "little", "dtype": "f32", "shape": [int(d) for d in tensor.shape]}
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("ascii")
    return text + HEADER_TERMINATOR + np.ascontiguousarray(tensor, dtype=PAYLOAD_DTYPE).tobytes()


def decode_tensor(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    """Inverse of encode_tensor; each kind of damage raises its own error."""
    end = blob.find(HEADER_TERMINATOR, 0, MAX_HEADER_BYTES)
    if end < 0:
        raise MalformedHeaderError(f"{source}: header terminator not found")
    try:
        header = json.loads(blob[:end].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedHeaderError(f"{source}: header is not valid JSON ({e})") from e
    if not isinstance(header, dict):
        raise MalformedHeaderError(f"{source}: header must be a JSON object")
    if header.get("dtype") != "f32" or header.get("byte_order") != "little":
        raise MalformedHeaderError(
            f"{source}: unsupported dtype/byte_order {header.get('dtype')!r}/{header.get('byte_order')!r}"
        )
    shape = header.get("shape")
    if not isinstance(shape, list) or not shape or not all(
        isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape
    ):
        raise MalformedHeaderError(f"{source}: invalid shape {shape!r}")

    payload = blob[end + len(HEADER_TERMINATOR) :]
    expected = int(np.prod(shape, dtype=np.int64)) * PAYLOAD_DTYPE.itemsize
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{source}: truncated payload ({len(payload)} of {expected} bytes for shape {shape})"
        )
    if len(payload) > expected:
        raise ByteLengthMismatchError(
            f"{source}: payload has {len(payload)} bytes but shape {shape} needs {expected}"
        )
    return np.frombuffer(payload, dtype=PAYLOAD_DTYPE).reshape(shape).astype(np.float32)


def write_tensor(path: str | Path, tensor: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(tensor))


def read_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    return decode_tensor(path.read_bytes(), str(path))
