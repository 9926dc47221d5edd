"""Reconstruction quality metrics on [0, 1]-normalized frames."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 100.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def psnr(ref, test, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at ``PSNR_CAP``."""
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"psnr: shape mismatch {ref.shape} vs {test.shape}")
    if peak <= 0:
        raise ValueError("psnr: peak must be positive")
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps."""
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=-2) @ g
    return sliding_window_view(rows, k, axis=-1) @ g


def ssim_map(ref: np.ndarray, test: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM over every fully-contained 11x11 Gaussian window."""
    g = gaussian_window()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mx = _filter_valid(ref, g)
    my = _filter_valid(test, g)
    sxx = _filter_valid(ref * ref, g) - mx * mx
    syy = _filter_valid(test * test, g) - my * my
    sxy = _filter_valid(ref * test, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(ref, test, data_range: float = 1.0) -> float:
    """Single-scale SSIM of (h, w) images; stacks (..., h, w) average over frames."""
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"ssim: shape mismatch {ref.shape} vs {test.shape}")
    if ref.ndim < 2 or min(ref.shape[-2:]) < SSIM_WIN:
        raise ValueError(f"ssim: images must be at least {SSIM_WIN}x{SSIM_WIN}, got {ref.shape}")
    ref2 = ref.reshape(-1, *ref.shape[-2:])
    test2 = test.reshape(-1, *test.shape[-2:])
    return float(np.mean([ssim_map(a, b, data_range).mean() for a, b in zip(ref2, test2)]))
