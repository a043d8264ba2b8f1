"""Training losses: MSE plus a structural-similarity term.

SSIM follows the standard Gaussian-weighted formulation: 11 x 11 window,
sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1.0, local statistics from a
'valid' convolution. Fields smaller than the window shrink it to the largest
odd size that fits, which keeps the loss usable on tiny test fields. The
combined loss is lambda_mse * MSE + lambda_ssim * (1 - SSIM); gradients come
from autograd.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import ValidationError

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
LAMBDA_MSE = 0.5
LAMBDA_SSIM = 1.5


def gaussian_window(win: int, sigma: float, dtype, device) -> torch.Tensor:
    """Normalized 1-D Gaussian of length ``win``."""
    half = (win - 1) / 2.0
    x = torch.arange(win, dtype=dtype, device=device) - half
    g = torch.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _as_batched(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[:, None]
    if x.dim() == 4:
        return x
    raise ValidationError(f"expected 2-D to 4-D input, got {x.dim()}-D")


def ssim(
    a: torch.Tensor,
    b: torch.Tensor,
    data_range: float = 1.0,
    win: int = SSIM_WIN,
    sigma: float = SSIM_SIGMA,
    k1: float = SSIM_K1,
    k2: float = SSIM_K2,
) -> torch.Tensor:
    """Mean structural similarity between two fields, in [-1, 1]."""
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    x = _as_batched(a)
    y = _as_batched(b)
    h, w = x.shape[-2:]
    eff = min(win, h, w)
    if eff % 2 == 0:
        eff -= 1
    if eff < 1:
        raise ValidationError("field is too small for any window")

    g = gaussian_window(eff, sigma, x.dtype, x.device)
    kh = g.view(1, 1, eff, 1)
    kw = g.view(1, 1, 1, eff)

    def blur(t):
        return F.conv2d(F.conv2d(t, kh), kw)

    mu_x = blur(x)
    mu_y = blur(y)
    xx = blur(x * x) - mu_x * mu_x
    yy = blur(y * y) - mu_y * mu_y
    xy = blur(x * y) - mu_x * mu_y

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return (num / den).mean()


def mse_ssim_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    lambda_mse: float = LAMBDA_MSE,
    lambda_ssim: float = LAMBDA_SSIM,
) -> torch.Tensor:
    """Weighted sum of squared error and structural dissimilarity."""
    if lambda_mse < 0 or lambda_ssim < 0:
        raise ValidationError("loss weights must be non-negative")
    if pred.shape != target.shape:
        raise ValidationError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    mse = torch.mean((pred - target) ** 2)
    return lambda_mse * mse + lambda_ssim * (1.0 - ssim(pred, target))


def make_loss(kind: str):
    """Loss factory: 'mse' or 'mse_ssim'."""
    if kind == "mse":
        return lambda p, t: torch.mean((p - t) ** 2)
    if kind == "mse_ssim":
        return mse_ssim_loss
    raise ValidationError(f"unknown loss kind {kind!r}")
