"""
Task-aware image selection: mask task regions, blur the background with a
strength keyed to the predicted transmission quality, and fuse.
"""
import io
import logging
from dataclasses import dataclass
from typing import FrozenSet, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

import src.params as params
from src.errors import ConfigurationError, ShapeError
from src.evaluation import EvalModel, extract_features, predict
from src.metrics import to_8bit
from src.segmentation import SegmentationMap

logger = logging.getLogger(__name__)

TASK_ONLY = params.task_only_kernel


@dataclass(frozen=True)
class TaskSpec:
    task_classes: FrozenSet[int]
    background_fill: Tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "task_classes", frozenset(int(c) for c in self.task_classes))
        object.__setattr__(self, "background_fill", tuple(int(v) for v in self.background_fill))
        if len(self.task_classes) == 0:
            raise ConfigurationError("TaskSpec needs at least one task class")
        if len(self.background_fill) != 3 or not all(0 <= v <= 255 for v in self.background_fill):
            raise ConfigurationError(
                f"background_fill must be three values in [0, 255], got {self.background_fill}"
            )

    def check_classes(self, num_classes: int) -> None:
        bad = sorted(c for c in self.task_classes if not 0 <= c < num_classes)
        if bad:
            raise ConfigurationError(
                f"Task classes {bad} are outside the {num_classes} segmentation classes"
            )


@dataclass(frozen=True)
class BlurTier:
    threshold: float
    kernel: int


@dataclass(frozen=True)
class BlurPolicy:
    """
    Ordered tiers of (lower bound on predicted quality, kernel size). A kernel
    of TASK_ONLY transmits the task region alone; 1 means no blur.
    """

    tiers: Tuple[BlurTier, ...]

    def __post_init__(self):
        object.__setattr__(self, "tiers", tuple(self.tiers))
        if len(self.tiers) == 0:
            raise ConfigurationError("Blur policy needs at least one tier")
        thresholds = [t.threshold for t in self.tiers]
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ConfigurationError(f"Blur thresholds must be strictly increasing: {thresholds}")
        for tier in self.tiers:
            if tier.kernel != TASK_ONLY and (tier.kernel < 1 or tier.kernel % 2 == 0):
                raise ConfigurationError(
                    f"Blur kernel must be odd and >= 1 (or {TASK_ONLY} for task only), "
                    f"got {tier.kernel}"
                )
        strengths = [_strength(t.kernel) for t in self.tiers]
        if any(b > a for a, b in zip(strengths, strengths[1:])):
            raise ConfigurationError(
                f"Blur kernels must not grow as quality rises: {[t.kernel for t in self.tiers]}"
            )
        if self.tiers[-1].kernel != 1:
            raise ConfigurationError("The highest blur tier must use kernel 1 (no blur)")

    @classmethod
    def from_lists(cls, thresholds: Sequence[float], kernels: Sequence[int]) -> "BlurPolicy":
        if len(thresholds) != len(kernels):
            raise ConfigurationError(
                f"Blur policy has {len(thresholds)} thresholds but {len(kernels)} kernels"
            )
        return cls(tuple(BlurTier(float(t), int(k)) for t, k in zip(thresholds, kernels)))

    def tier_for(self, predicted_quality: float) -> int:
        if not np.isfinite(predicted_quality) or predicted_quality < self.tiers[0].threshold:
            raise ConfigurationError(
                f"No blur tier covers predicted quality {predicted_quality}; "
                "set the first threshold to a very negative number"
            )
        thresholds = np.array([t.threshold for t in self.tiers])
        return int(np.searchsorted(thresholds, predicted_quality, side="right") - 1)

    def tier_with_kernel(self, kernel: int) -> int:
        for i, tier in enumerate(self.tiers):
            if tier.kernel == kernel:
                return i
        raise ConfigurationError(f"No blur tier uses kernel {kernel}")


def _strength(kernel: int) -> float:
    return float("inf") if kernel == TASK_ONLY else float(kernel)


@dataclass
class SelectedImage:
    pixels: np.ndarray
    mask: np.ndarray
    tier_used: int
    predicted_quality: float
    kernel: int


def build_task_mask(seg_map: SegmentationMap, task: TaskSpec) -> np.ndarray:
    task.check_classes(seg_map.num_classes)
    return np.isin(seg_map.classes, sorted(task.task_classes))


def mean_blur(image: np.ndarray, k: int) -> np.ndarray:
    """
    k x k box mean per channel with edge replication; k = 1 is the identity.

    Args:
        image: H x W x C image, float or 8-bit
        k: odd kernel side, 1 <= k <= min(H, W)

    Returns:
        Blurred image of the same dtype (8-bit input is rounded back)
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"Expected an H x W x C image, got {image.shape}")
    if k % 2 == 0:
        raise ConfigurationError(f"Blur kernel must be odd, got {k}")
    if not 1 <= k <= min(image.shape[:2]):
        raise ConfigurationError(f"Blur kernel {k} outside [1, {min(image.shape[:2])}]")
    if k == 1:
        return image.copy()
    blurred = ndimage.uniform_filter(image.astype(np.float64), size=(k, k, 1), mode="nearest")
    if image.dtype == np.uint8:
        return np.clip(np.rint(blurred), 0, 255).astype(np.uint8)
    return blurred.astype(image.dtype)


def _fill_value(image: np.ndarray, task: TaskSpec) -> np.ndarray:
    fill = np.array(task.background_fill, dtype=np.float64)
    if image.dtype == np.uint8:
        return fill.astype(np.uint8)
    return (fill / 255.0).astype(image.dtype)


def select(
    image: np.ndarray,
    seg_map: SegmentationMap,
    task: TaskSpec,
    snr_db: float,
    model: EvalModel,
    policy: BlurPolicy,
    snr_range: Tuple[float, float] = (params.default_snr_db_min, params.default_snr_db_max),
    tier_override: Optional[int] = None,
) -> SelectedImage:
    """
    Predicts the transmission quality, picks the blur tier and fuses the
    blurred (or filled) background with the untouched task region.

    Parameters
    ----------
    image : np.ndarray
        H x W x 3 source image.
    seg_map : SegmentationMap
        Class map of the image.
    task : TaskSpec
        Task classes and the task-only background fill.
    snr_db : float
        Current link SNR.
    model : EvalModel
        Fitted evaluator.
    policy : BlurPolicy
        Quality tiers and their kernels.
    snr_range : tuple of float, optional
        SNR range used to normalise the channel feature.
    tier_override : int, optional
        Forces a tier index instead of the predicted one.

    Returns
    -------
    SelectedImage
    """
    image = np.asarray(image)
    if tuple(seg_map.shape) != image.shape[:2]:
        raise ShapeError(f"Segmentation map {seg_map.shape} does not match image {image.shape[:2]}")
    features = extract_features(image, seg_map, task, snr_db, snr_range)
    predicted = predict(model, features)
    if tier_override is None:
        tier = policy.tier_for(predicted)
    elif 0 <= tier_override < len(policy.tiers):
        tier = tier_override
    else:
        raise ConfigurationError(
            f"Tier override {tier_override} outside [0, {len(policy.tiers)})"
        )
    kernel = policy.tiers[tier].kernel
    mask = build_task_mask(seg_map, task)

    if kernel == TASK_ONLY:
        background = np.broadcast_to(_fill_value(image, task), image.shape)
    else:
        background = mean_blur(image, min(kernel, _largest_odd(min(image.shape[:2]))))
    pixels = np.where(mask[..., None], image, background).astype(image.dtype)

    logger.info(
        f"Selection at {snr_db} dB: predicted quality {predicted:.3f}, tier {tier}, "
        f"kernel {'task-only' if kernel == TASK_ONLY else kernel}, "
        f"task fraction {features.x_s:.3f}"
    )
    return SelectedImage(pixels, mask, tier, predicted, kernel)


def _largest_odd(n: int) -> int:
    return n if n % 2 else n - 1


def payload_size(image: np.ndarray) -> int:
    """Bytes of the image under the pinned lossless PNG configuration."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = to_8bit(image)
    buffer = io.BytesIO()
    Image.fromarray(image).save(buffer, format="PNG", compress_level=params.png_compress_level)
    return buffer.getbuffer().nbytes
