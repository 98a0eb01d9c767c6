"""
Evaluation metrics and confusion rendering for binary fire masks.

Counts are aggregated over all evaluated pixels of a split (micro
averaging); pixels whose target is the ignore value are excluded.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from app.core.errors import ShapeError
from app.schemas.reports import MetricsReport

COLOR_TP = (255, 128, 0)
COLOR_FP = (255, 255, 0)
COLOR_FN = (0, 0, 255)
COLOR_UNCERTAIN = (64, 64, 64)
GRAY_DEFAULT = 128


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixel confusion counts; addition sums them."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _check_shapes(pred: np.ndarray, target: np.ndarray) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")


def confusion_counts(pred_mask: np.ndarray, target: np.ndarray, ignore_value: float = -1) -> ConfusionCounts:
    """TP/FP/FN/TN over pixels whose target is not ignore_value."""
    _check_shapes(pred_mask, target)
    valid = target != ignore_value
    pred = (pred_mask > 0) & valid
    truth = (target > 0) & valid
    return ConfusionCounts(
        tp=int(np.count_nonzero(pred & truth)),
        fp=int(np.count_nonzero(pred & ~truth & valid)),
        fn=int(np.count_nonzero(~pred & truth)),
        tn=int(np.count_nonzero(~pred & ~truth & valid)),
    )


def sum_counts(counts: Iterable[ConfusionCounts]) -> ConfusionCounts:
    total = ConfusionCounts()
    for c in counts:
        total = total + c
    return total


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall (0 when both are 0)."""
    return _ratio(2.0 * precision * recall, precision + recall)


def derive_metrics(counts: ConfusionCounts) -> MetricsReport:
    """Precision, recall, IoU and F1 from aggregate counts."""
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    return MetricsReport(
        tp=counts.tp,
        fp=counts.fp,
        fn=counts.fn,
        tn=counts.tn,
        precision=precision,
        recall=recall,
        iou=_ratio(counts.tp, counts.tp + counts.fp + counts.fn),
        f1=f1_score(precision, recall),
    )


def _background_gray(background: Optional[np.ndarray], shape: tuple[int, ...]) -> np.ndarray:
    if background is None:
        return np.full(shape, GRAY_DEFAULT, dtype=np.uint8)
    if background.shape != shape:
        raise ShapeError(f"background shape {background.shape} != mask shape {shape}")
    b = background.astype(np.float64)
    lo, hi = float(b.min()), float(b.max())
    if hi <= lo:
        return np.full(shape, GRAY_DEFAULT, dtype=np.uint8)
    return np.rint((b - lo) / (hi - lo) * 255.0).astype(np.uint8)


def render_confusion_image(
    pred_mask: np.ndarray,
    target: np.ndarray,
    background: Optional[np.ndarray] = None,
    ignore_value: float = -1,
) -> np.ndarray:
    """
    (H, W, 3) uint8 image: FP yellow, FN blue, TP orange, uncertain dark gray,
    TN the min-max scaled background (mid-gray without one).
    """
    pred_mask, target = np.squeeze(pred_mask), np.squeeze(target)
    _check_shapes(pred_mask, target)
    if pred_mask.ndim != 2:
        raise ShapeError(f"confusion image needs 2D masks, got shape {pred_mask.shape}")
    if background is not None:
        background = np.squeeze(background)

    gray = _background_gray(background, pred_mask.shape)
    image = np.repeat(gray[:, :, None], 3, axis=2)
    uncertain = target == ignore_value
    pred = (pred_mask > 0) & ~uncertain
    truth = (target > 0) & ~uncertain
    image[pred & truth] = COLOR_TP
    image[pred & ~truth & ~uncertain] = COLOR_FP
    image[~pred & truth] = COLOR_FN
    image[uncertain] = COLOR_UNCERTAIN
    return image


def encode_ppm(image: np.ndarray) -> bytes:
    """Binary PPM (P6) with maxval 255."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ShapeError(f"PPM needs an (H, W, 3) uint8 image, got {image.shape} {image.dtype}")
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image).tobytes()


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_ppm(image))
