"""
PSNR, SSIM and pixel accuracy, with region-restricted PSNR for task areas.

All metric inputs are on the 8-bit scale [0, 255]; internal [0, 1] images go
through `to_8bit` first.
"""
import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

import src.params as params
from src.errors import ConfigurationError, ShapeError

INF = float("inf")


@dataclass
class MetricsReport:
    psnr_db: float
    ssim: float
    task_psnr_db: float
    payload_bytes: int
    snr_db: float
    depth: int
    tier: int = -1

    def to_row(self, run_id: str) -> Dict[str, object]:
        """CSV row with INF PSNR written as the string 'inf'."""
        return {
            "run_id": run_id,
            "snr_db": self.snr_db,
            "depth": self.depth,
            "tier": self.tier,
            "psnr_db": format_db(self.psnr_db),
            "task_psnr_db": format_db(self.task_psnr_db),
            "ssim": self.ssim,
            "payload_bytes": self.payload_bytes,
        }


def format_db(value: float):
    return "inf" if math.isinf(value) else value


def to_8bit(image: np.ndarray) -> np.ndarray:
    """Rounds a [0, 1] image onto the 8-bit grid."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(
        np.uint8
    )


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"Image shapes differ: {a.shape} vs {b.shape}")


def psnr(
    a: np.ndarray,
    b: np.ndarray,
    region: Optional[np.ndarray] = None,
    max_value: float = params.pixel_max,
) -> float:
    """
    Peak signal-to-noise ratio in dB.

    Parameters
    ----------
    a, b : np.ndarray
        Images of equal shape on the 8-bit scale.
    region : np.ndarray, optional
        H x W boolean mask; the MSE is averaged over its pixels and all channels.
    max_value : float, optional
        Peak value. The default is 255.

    Returns
    -------
    float
        10 log10(max^2 / MSE), or INF when the MSE is zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)

    squared_error = (a - b) ** 2
    if region is not None:
        region = np.asarray(region, dtype=bool)
        if region.shape != a.shape[:2]:
            raise ShapeError(
                f"Region shape {region.shape} does not match image {a.shape[:2]}"
            )
        if not region.any():
            raise ConfigurationError("PSNR region is empty")
        squared_error = squared_error[region]

    mse = float(np.mean(squared_error))
    if mse == 0:
        return INF
    return 10.0 * math.log10(max_value**2 / mse)


def _ssim_map(
    x: np.ndarray, y: np.ndarray, side: Tuple[int, int], c1: float, c2: float
) -> np.ndarray:
    x_windows = sliding_window_view(x, side)
    y_windows = sliding_window_view(y, side)
    mu_x = x_windows.mean(axis=(-2, -1))
    mu_y = y_windows.mean(axis=(-2, -1))
    dx = x_windows - mu_x[..., None, None]
    dy = y_windows - mu_y[..., None, None]
    var_x = (dx * dx).mean(axis=(-2, -1))
    var_y = (dy * dy).mean(axis=(-2, -1))
    cov = (dx * dy).mean(axis=(-2, -1))
    return ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: int = params.ssim_window,
    mode: str = "sliding",
    dynamic_range: float = params.pixel_max,
) -> float:
    """
    Structural similarity, averaged over stride-1 windows and channels.

    Parameters
    ----------
    a, b : np.ndarray
        H x W or H x W x C images of equal shape on the 8-bit scale.
    window : int, optional
        Side of the sliding window, clipped to the image size. The default is 8.
    mode : str, optional
        "sliding" (mean over windows) or "global" (one window per channel).
    dynamic_range : float, optional
        L in c1 = (k1 L)^2, c2 = (k2 L)^2. The default is 255.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]

    c1 = (params.ssim_k1 * dynamic_range) ** 2
    c2 = (params.ssim_k2 * dynamic_range) ** 2
    if mode == "global":
        side = a.shape[:2]
    elif mode == "sliding":
        side = (min(window, a.shape[0]), min(window, a.shape[1]))
    else:
        raise ConfigurationError(f"Unknown SSIM mode: {mode}")

    scores = []
    for channel in range(a.shape[2]):
        scores.append(_ssim_map(a[..., channel], b[..., channel], side, c1, c2).mean())
    return float(np.mean(scores))


def pixel_accuracy(predicted: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of cells where two class-id grids agree."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    _check_shapes(predicted, truth)
    return float(np.mean(predicted == truth))
