"""Full-reference image metrics and the mean-fill inpainting floor."""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DimensionError
from .frames import MaskedFrame

PSNR_CAP = 99.0
MSE_FLOOR = 1e-10
SSIM_WINDOW = 8
SSIM_STRIDE = 4
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, mask: Optional[np.ndarray] = None) -> float:
    """PSNR in dB for peak value 1.0, optionally restricted to ``mask == 1`` pixels.

    Returns the 99 dB sentinel when the MSE is below 1e-10.
    """
    a, b = _pair(a, b)
    if mask is not None:
        sel = np.asarray(mask).astype(bool)
        if sel.shape != a.shape[:2]:
            raise DimensionError(f"mask {sel.shape} does not match image {a.shape[:2]}")
        if not sel.any():
            raise ValueError("psnr over an empty mask")
        a, b = a[sel], b[sel]
    mse = float(np.mean((a - b) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return -10.0 * np.log10(mse)


def ssim(a, b) -> float:
    """Mean SSIM over 8x8 windows at stride 4, per channel, population moments."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    h, w = a.shape[:2]
    win = (min(SSIM_WINDOW, h), min(SSIM_WINDOW, w))
    wa = sliding_window_view(a, win, axis=(0, 1))[::SSIM_STRIDE, ::SSIM_STRIDE]
    wb = sliding_window_view(b, win, axis=(0, 1))[::SSIM_STRIDE, ::SSIM_STRIDE]
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = ((wa - mu_a[..., None, None]) * (wb - mu_b[..., None, None])).mean(axis=(-2, -1))
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def mean_fill_baseline(rendered: MaskedFrame) -> np.ndarray:
    known = rendered.mask.astype(bool)
    if not known.any():
        raise ValueError("mean fill needs at least one known pixel")
    mean = rendered.rgb[known].mean(axis=0)
    return np.where(known[..., None], rendered.rgb, mean)
