"""Image quality metrics on stacks of images shaped ``(rows, cols, samples)`` or single images."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

PSNR_INF = float("inf")


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[:, :, None], y[:, :, None]
    if x.ndim != 3:
        raise ValueError("expected an image or a (rows, cols, samples) stack")
    return x, y


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def psnr_from_mse(e: float, peak: float = 1.0) -> float:
    if not peak > 0:
        raise ValueError("peak must be positive")
    if e < 0:
        raise ValueError("mse must be nonnegative")
    return PSNR_INF if e == 0 else float(10.0 * np.log10(peak**2 / e))


def psnr(x, y, peak: float = 1.0) -> float:
    """PSNR of the pooled squared error over every pixel of every sample."""
    return psnr_from_mse(mse(x, y), peak)


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps of odd length ``size``."""
    if size < 1 or size % 2 == 0:
        raise ValueError("window size must be odd and positive")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    r = np.arange(size) - size // 2
    w = np.exp(-(r**2) / (2 * sigma**2))
    return w / w.sum()


def _smooth(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    return correlate1d(correlate1d(img, w, axis=0, mode="nearest"), w, axis=1, mode="nearest")


def ssim_map(x: np.ndarray, y: np.ndarray, peak: float = 1.0, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    """Local SSIM for one image pair, Gaussian-weighted, replicate borders."""
    w = gaussian_window(cfg.window, cfg.sigma)
    c1, c2 = (cfg.k1 * peak) ** 2, (cfg.k2 * peak) ** 2
    mx, my = _smooth(x, w), _smooth(y, w)
    sxx = _smooth(x * x, w) - mx * mx
    syy = _smooth(y * y, w) - my * my
    sxy = _smooth(x * y, w) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(x, y, peak: float = 1.0, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean SSIM per image, averaged over the stack."""
    if not peak > 0:
        raise ValueError("peak must be positive")
    x, y = _pair(x, y)
    return float(np.mean([ssim_map(x[:, :, i], y[:, :, i], peak, cfg).mean() for i in range(x.shape[2])]))
