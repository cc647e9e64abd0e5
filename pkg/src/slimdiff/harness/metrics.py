"""PSNR and SSIM for single-channel images in [0, 1]."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 100.0


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(gt, np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))


def _gauss_window(size=11, sigma=1.5):
    x = np.arange(size) - size // 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _filt(img, g):
    r = g.size // 2
    out = correlate1d(correlate1d(img, g, axis=0), g, axis=1)
    return out[r:-r, r:-r]


def ssim(pred: np.ndarray, gt: np.ndarray, data_range: float = 1.0,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), valid region only."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    x = np.asarray(pred, np.float64)
    y = np.asarray(gt, np.float64)
    if x.ndim != 2:
        return float(np.mean([ssim(a, b, data_range, k1, k2) for a, b in
                              zip(x.reshape(-1, *x.shape[-2:]), y.reshape(-1, *y.shape[-2:]))]))
    g = _gauss_window()
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mx, my = _filt(x, g), _filt(y, g)
    sxx = _filt(x * x, g) - mx * mx
    syy = _filt(y * y, g) - my * my
    sxy = _filt(x * y, g) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())


def metrics(pred: np.ndarray, gt: np.ndarray) -> dict:
    """Batch-averaged PSNR/SSIM; inputs ``(H, W)`` or ``(B, 1, H, W)``."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p = np.clip(pred, 0.0, 1.0).reshape(-1, *pred.shape[-2:])
    t = gt.reshape(-1, *gt.shape[-2:])
    return {
        "psnr": float(np.mean([psnr(a, b) for a, b in zip(p, t)])),
        "ssim": float(np.mean([ssim(a, b) for a, b in zip(p, t)])),
    }
