"""Image quality metrics and the extrapolated-view filter."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ContractError
from .geometry import rotation_angle

# Boundary tolerance on the 90 degree test, so ring cameras exactly at 90 count.
ANGLE_TOL_DEG = 1e-9


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images; ``inf`` when identical."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0.0 else float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, win, axis=0, mode="constant")
    out = ndimage.correlate1d(out, win, axis=1, mode="constant")
    r = len(win) // 2
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid window positions on channel-mean grayscale.

    Gaussian window (11 x 11, sigma 1.5), C1 = 0.01^2, C2 = 0.03^2.
    """
    a, b = _check_pair(a, b)
    if a.ndim == 3:
        a, b = a.mean(axis=-1), b.mean(axis=-1)
    if min(a.shape) < window:
        raise ContractError(f"image {a.shape} smaller than the {window}x{window} window")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    win = gaussian_window(window, sigma)
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a * mu_a
    var_b = _filter_valid(b * b, win) - mu_b * mu_b
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def extrapolated_subset(rotations: Sequence[np.ndarray], input_indices: Sequence[int],
                        min_angle: float = 90.0) -> list[int]:
    """Views rotated by at least ``min_angle`` degrees from every input view."""
    inputs = set(int(i) for i in input_indices)
    out = []
    for v, R in enumerate(rotations):
        if v in inputs:
            continue
        if all(rotation_angle(R, rotations[i]) >= min_angle - ANGLE_TOL_DEG for i in inputs):
            out.append(v)
    return out
