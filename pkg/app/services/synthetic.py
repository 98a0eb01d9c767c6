"""
Seeded synthetic wildfire-spread generator.

Each sample has smooth-noise terrain channels, a constant wind vector, a
random elliptical pre-fire blob, and a next-day mask grown from the blob by
isotropic dilation plus downwind drift. Growth only adds pixels, so the
next-day mask contains the pre-fire mask; a fixed fraction of target pixels
is then marked uncertain (-1).
"""

import logging
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation, gaussian_filter, shift

from app.schemas.config import SynthConfig
from app.schemas.dataset import Manifest, ManifestEntry
from app.services.tensor_file import write_tensor

logger = logging.getLogger(__name__)

CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def _smooth_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    field = gaussian_filter(rng.standard_normal((n, n)), sigma=max(n / 8.0, 1.0), mode="reflect")
    spread = field.std()
    return (field - field.mean()) / (spread if spread > 0 else 1.0)


def _ellipse(rng: np.random.Generator, n: int) -> np.ndarray:
    cy, cx = rng.uniform(n / 4.0, 3.0 * n / 4.0, size=2)
    ay, ax = rng.uniform(max(n / 16.0, 1.0), max(n / 6.0, 1.5), size=2)
    theta = rng.uniform(0.0, np.pi)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    blob = (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
    if not blob.any():
        blob[int(cy), int(cx)] = True
    return blob


def grow_fire(prefire: np.ndarray, wind: tuple[float, float], steps: int, wind_bias: float) -> np.ndarray:
    """
    Next-day footprint: every step adds the downwind-shifted footprint, and
    every other step an isotropic one-pixel dilation.
    """
    mask = prefire.astype(bool).copy()
    wx, wy = wind
    speed = float(np.hypot(wx, wy))
    if speed > 0:
        offset = (round(wind_bias * wy / speed), round(wind_bias * wx / speed))
    else:
        offset = (0, 0)
    for step in range(steps):
        drifted = shift(mask.astype(np.uint8), offset, order=0, mode="constant", cval=0) > 0
        grown = mask | drifted
        if step % 2 == 0:
            grown |= binary_dilation(mask, structure=CROSS)
        mask = grown
    return mask


def make_sample(cfg: SynthConfig, index: int) -> tuple[np.ndarray, np.ndarray]:
    """(inputs C x N x N, target 1 x N x N) of sample `index`; a pure function of (cfg, index)."""
    rng = np.random.default_rng([cfg.seed, index])
    n = cfg.resolution
    angle = rng.uniform(0.0, 2.0 * np.pi)
    speed = rng.uniform(0.5, 1.5)
    wind = (speed * np.cos(angle), speed * np.sin(angle))
    prefire = _ellipse(rng, n)

    channels = []
    for role in cfg.channel_roles:
        if role == "prefire_mask":
            channels.append(prefire.astype(np.float32))
        elif role == "wind_x":
            channels.append(np.full((n, n), wind[0], dtype=np.float32))
        elif role == "wind_y":
            channels.append(np.full((n, n), wind[1], dtype=np.float32))
        else:
            channels.append(_smooth_noise(rng, n).astype(np.float32))

    target = grow_fire(prefire, wind, cfg.growth_steps, cfg.wind_bias).astype(np.float32)
    n_uncertain = int(round(cfg.uncertain_fraction * n * n))
    if n_uncertain:
        flat = rng.choice(n * n, size=n_uncertain, replace=False)
        target.reshape(-1)[flat] = -1.0
    return np.stack(channels), target[None]


def generate_synthetic(cfg: SynthConfig, out_dir: str | Path) -> Manifest:
    """Write every sample as tensor files plus manifest.json under out_dir."""
    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    for index in range(cfg.count):
        inputs, target = make_sample(cfg, index)
        sample_id = f"sample_{index:05d}"
        input_path = f"samples/{sample_id}.input.tdt"
        target_path = f"samples/{sample_id}.target.tdt"
        write_tensor(out_dir / input_path, inputs)
        write_tensor(out_dir / target_path, target)
        entries.append(ManifestEntry(sample_id=sample_id, input_path=input_path, target_path=target_path))

    manifest = Manifest(
        channel_roles=list(cfg.channel_roles),
        channels=len(cfg.channel_roles),
        resolution=cfg.resolution,
        samples=entries,
    )
    logger.info(f"Generated {cfg.count} synthetic samples at N={cfg.resolution} in {out_dir}")
    return manifest
