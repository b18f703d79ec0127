"""Image quality metrics computed in float64 on ``[C, H, W]`` arrays in [0, 1]."""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import convolve2d

from .types import ShapeError, check_same_shape

PSNR_CAP = 100.0


def psnr(pred, target, *, data_range: float = 1.0, cap: float = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio in dB.

    Returns ``cap`` when the mean squared error falls below 1e-10.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    check_same_shape(pred, target)
    mse = float(np.mean((pred - target) ** 2))
    if mse < 1e-10:
        return float(cap)
    return 10.0 * math.log10(data_range**2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(
    pred,
    target,
    *,
    data_range: float = 1.0,
    win_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean structural similarity over all valid windows, averaged over channels.

    Uses the Gaussian-weighted formulation (11x11, sigma 1.5) with
    population statistics; only windows fully inside the image contribute.
    Accepts ``[C, H, W]`` or ``[H, W]`` arrays.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    check_same_shape(pred, target)
    if pred.ndim == 2:
        pred, target = pred[None], target[None]
    if pred.ndim != 3:
        raise ShapeError(f"expected [C, H, W], got {pred.shape}")
    if pred.shape[1] < win_size or pred.shape[2] < win_size:
        raise ShapeError(f"image {pred.shape[1]}x{pred.shape[2]} smaller than {win_size}x{win_size} window")

    win = gaussian_window(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def filt(x):
        # window is symmetric, so convolution == correlation
        return convolve2d(x, win, mode="valid")

    scores = []
    for x, y in zip(pred, target):
        mu_x, mu_y = filt(x), filt(y)
        sxx = filt(x * x) - mu_x**2
        syy = filt(y * y) - mu_y**2
        sxy = filt(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))
