"""PSNR and single-scale SSIM on [0, 1] images."""

from __future__ import annotations

import math

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def to_rgb(img, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """RGB view of an image; premultiplied RGBA is composited over ``background``."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[-1] == 4:
        bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
        return img[..., :3] + (1.0 - img[..., 3:4]) * bg
    if img.shape[-1] != 3:
        raise ValueError(f"expected RGB or RGBA image, got shape {img.shape}")
    return img


def _pair(a, b, background):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"image sizes differ: {a.shape} vs {b.shape}")
    return to_rgb(a, background), to_rgb(b, background)


def psnr_from_mse(mse: float) -> float:
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def psnr(a, b, background=(0.0, 0.0, 0.0)) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    a, b = _pair(a, b, background)
    return psnr_from_mse(float(np.mean((a - b) ** 2)))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img, g):
    # separable correlation, 'valid' region only, (H, W, C) -> (H-k+1, W-k+1, C)
    win = np.lib.stride_tricks.sliding_window_view(img, len(g), axis=0)
    tmp = np.einsum("hwck,k->hwc", win, g)
    win = np.lib.stride_tricks.sliding_window_view(tmp, len(g), axis=1)
    return np.einsum("hwck,k->hwc", win, g)


def ssim_map(a, b) -> np.ndarray:
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (saa + sbb + SSIM_C2)
    return num / den


def ssim(a, b, background=(0.0, 0.0, 0.0)) -> float:
    """Mean SSIM over channels and valid window positions."""
    a, b = _pair(a, b, background)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    return float(np.mean(ssim_map(a, b)))
