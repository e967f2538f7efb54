"""Image quality metrics on [0, 1] images."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(x_hat: np.ndarray, x_ref: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    x_hat, x_ref = np.asarray(x_hat, float), np.asarray(x_ref, float)
    if x_hat.shape != x_ref.shape:
        raise ValueError(f"shape mismatch {x_hat.shape} vs {x_ref.shape}")
    mse = float(np.mean((x_hat - x_ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def _gaussian_window() -> np.ndarray:
    r = np.arange(SSIM_WIN) - SSIM_WIN // 2
    g = np.exp(-(r**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    h = SSIM_WIN // 2
    return out[h:-h, h:-h]


def ssim(x_hat: np.ndarray, x_ref: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over the valid region."""
    a, b = np.asarray(x_hat, float), np.asarray(x_ref, float)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"need two equal 2-D images, got {a.shape} and {b.shape}")
    if min(a.shape) < SSIM_WIN:
        raise ValueError(f"images must be at least {SSIM_WIN} pixels per side")
    g = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a**2
    sbb = _filter_valid(b * b, g) - mu_b**2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))
