"""Image quality metrics: PSNR and 5-scale MS-SSIM with a 7x7 Gaussian window."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW_SIZE = 7
WINDOW_SIGMA = 1.5
PSNR_CAP = 100.0
_K1, _K2 = 0.01, 0.03


def psnr(a, b) -> float:
    """Peak SNR in dB for images in [0, 1]; 100 dB when MSE < 1e-10."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * np.log10(1.0 / mse)


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _check_scales(h: int, w: int, levels: int, window: int):
    sh, sw = h >> (levels - 1), w >> (levels - 1)
    if sh < window or sw < window:
        raise ValueError(f"image {h}x{w} too small for {levels} scales with a {window}x{window} window (smallest scale {sh}x{sw})")


def _to_bchw(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[None, None]
    if img.ndim == 3:
        return img[None]
    return img


def msssim(a, b, window_size: int = WINDOW_SIZE) -> float:
    """Multi-scale SSIM of two ``(C, H, W)`` (or batched) images in [0, 1].

    Per-channel contrast-structure and final-scale SSIM terms are clipped at
    zero before the weighted product; the result is averaged over channels
    and batch.
    """
    x = Tensor(_to_bchw(a))
    y = Tensor(_to_bchw(b))
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    with T.no_grad():
        return float(msssim_tensor(x, y, window_size).data)


def msssim_tensor(x: Tensor, y: Tensor, window_size: int = WINDOW_SIZE) -> Tensor:
    """Differentiable MS-SSIM on ``(B, C, H, W)`` tensors, mean over batch and channels."""
    levels = len(MSSSIM_WEIGHTS)
    _check_scales(x.shape[2], x.shape[3], levels, window_size)
    kernel = gaussian_window(window_size)
    c1, c2 = _K1**2, _K2**2
    total = None
    for level, weight in enumerate(MSSSIM_WEIGHTS):
        mu_x = T.filter2d_valid(x, kernel)
        mu_y = T.filter2d_valid(y, kernel)
        sxx = T.filter2d_valid(x * x, kernel) - mu_x * mu_x
        syy = T.filter2d_valid(y * y, kernel) - mu_y * mu_y
        sxy = T.filter2d_valid(x * y, kernel) - mu_x * mu_y
        cs_map = (2.0 * sxy + c2) / (sxx + syy + c2)
        if level < levels - 1:
            term = T.relu(T.mean(cs_map, axis=(2, 3)))
            x, y = T.avg_pool2(x), T.avg_pool2(y)
        else:
            lum = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
            term = T.relu(T.mean(lum * cs_map, axis=(2, 3)))
        # x**w with the gradient defined at 0
        powered = T.exp(T.log(T.clamp(term, 1e-12, None)) * weight)
        total = powered if total is None else total * powered
    return T.mean(total)
