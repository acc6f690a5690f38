"""Image-quality metrics: PSNR and Gaussian-windowed SSIM.

Both metrics are pure formulas over the given arrays.  Reconstruction
pipelines clamp their outputs to [0, 1] before calling these, so the
defaults assume a unit data range.
"""
from __future__ import annotations

import math

import numpy as np

from .images import image_values

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(test, ref, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB: 10*log10(data_range^2 / MSE).

    Identical images (zero MSE) return ``inf``.
    """
    test = image_values(test)
    ref = image_values(ref)
    if test.shape != ref.shape:
        raise ValueError(f"shape mismatch: {test.shape} vs {ref.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((test - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(offsets**2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def _windowed_mean(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # 'valid' sliding windows; window sums weighted by the Gaussian kernel.
    view = np.lib.stride_tricks.sliding_window_view(img, win.shape)
    return np.tensordot(view, win, axes=([2, 3], [0, 1]))


def _ssim_2d(test: np.ndarray, ref: np.ndarray, data_range: float) -> float:
    win = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    mu_x = _windowed_mean(test, win)
    mu_y = _windowed_mean(ref, win)
    xx = _windowed_mean(test * test, win) - mu_x**2
    yy = _windowed_mean(ref * ref, win) - mu_y**2
    xy = _windowed_mean(test * ref, win) - mu_x * mu_y

    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def ssim(test, ref, data_range: float = 1.0) -> float:
    """Mean local structural similarity over valid 11x11 Gaussian windows.

    3D inputs are evaluated slice-wise along the first axis and averaged.
    """
    test = image_values(test)
    ref = image_values(ref)
    if test.shape != ref.shape:
        raise ValueError(f"shape mismatch: {test.shape} vs {ref.shape}")
    if test.ndim == 3:
        return float(np.mean([_ssim_2d(t, r, data_range) for t, r in zip(test, ref)]))
    if test.ndim != 2:
        raise ValueError("ssim expects a 2D or 3D image")
    if min(test.shape) < SSIM_WINDOW:
        raise ValueError(
            f"image {test.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    return _ssim_2d(test, ref, data_range)
