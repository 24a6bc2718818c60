"""Image quality metrics and the training objective (MSE + lambda * (1 - SSIM))."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DimensionError

PSNR_CAP = 100.0


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.5
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError("SSIM weight must be non-negative")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigurationError("SSIM window must be odd")


def _gaussian(size: int, sigma: float, dtype) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x * x) / (2 * sigma * sigma))
    return (g / g.sum()).to(dtype)


def ssim(a: torch.Tensor, b: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Mean SSIM over all 2-D planes (last two axes) of ``a`` and ``b``.

    Gaussian-weighted local statistics with valid (unpadded) filtering.  When
    a plane is smaller than the window, the window shrinks to the largest odd
    size that fits.
    """
    if a.shape != b.shape:
        raise DimensionError(f"ssim shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() < 2:
        raise DimensionError("ssim needs at least two axes")
    H, W = a.shape[-2:]
    size = min(cfg.window, H - (H + 1) % 2, W - (W + 1) % 2)
    g = _gaussian(size, cfg.sigma, a.dtype)
    x = a.reshape(-1, 1, H, W)
    y = b.reshape(-1, 1, H, W)

    def blur(t):
        t = F.conv2d(t, g.view(1, 1, 1, -1))
        return F.conv2d(t, g.view(1, 1, -1, 1))

    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return (num / den).mean()


def psnr(a, b, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` in dB, capped at 100 dB for identical inputs."""
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def loss(pred: torch.Tensor, target: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"loss shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    mse = ((pred - target) ** 2).mean()
    return mse + cfg.lam * (1.0 - ssim(pred, target, cfg))
