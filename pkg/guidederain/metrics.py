"""
Image quality metrics: PSNR and SSIM.

Both are computed on RGB: SSIM per channel, then averaged.
"""
from __future__ import annotations

from typing import Optional
import logging
import math

import numpy as np
from scipy.signal import correlate2d

from .models import ImageMetrics
from .tensor import InvalidArgumentError, Tensor


logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise InvalidArgumentError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def psnr(a: Tensor, b: Tensor, peak: float = 1.0) -> float:
    """
    Peak signal-to-noise ratio in dB.

    Returns:
        10 * log10(peak^2 / MSE), or math.inf for identical inputs

    Raises:
        InvalidArgumentError: On shape mismatch or nonpositive peak
    """
    _check_pair("psnr", a, b)
    if peak <= 0:
        raise InvalidArgumentError(f"psnr: peak must be positive, got {peak}")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian window."""
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_channel(x: np.ndarray, y: np.ndarray, window: np.ndarray, c1: float, c2: float) -> float:
    mu_x = correlate2d(x, window, mode="valid")
    mu_y = correlate2d(y, window, mode="valid")
    xx = correlate2d(x * x, window, mode="valid") - mu_x * mu_x
    yy = correlate2d(y * y, window, mode="valid") - mu_y * mu_y
    xy = correlate2d(x * y, window, mode="valid") - mu_x * mu_y
    numerator = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return float(np.mean(numerator / denominator))


def ssim(a: Tensor, b: Tensor, peak: float = 1.0) -> float:
    """
    Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Only windows fully inside the image contribute. Channels and batch
    items are averaged with equal weight.

    Raises:
        InvalidArgumentError: On shape mismatch or images smaller than the window
    """
    _check_pair("ssim", a, b)
    if a.data.ndim != 4:
        raise InvalidArgumentError(f"ssim: expected 4-D tensors, got shape {a.shape}")
    if min(a.shape[2], a.shape[3]) < SSIM_WINDOW:
        raise InvalidArgumentError(
            f"ssim: image {a.shape[2]}x{a.shape[3]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    window = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    x = a.data.astype(np.float64)
    y = b.data.astype(np.float64)
    scores = [
        _ssim_channel(x[n, c], y[n, c], window, c1, c2)
        for n in range(x.shape[0])
        for c in range(x.shape[1])
    ]
    return float(np.mean(scores))


def image_metrics(
    name: str,
    derained: Tensor,
    truth: Tensor,
    physical_residual: Optional[float] = None,
) -> ImageMetrics:
    """PSNR and SSIM of one derained image."""
    return ImageMetrics(
        name=name,
        psnr=psnr(derained, truth),
        ssim=ssim(derained, truth),
        physical_residual=physical_residual,
    )
