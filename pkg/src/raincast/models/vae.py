"""Variational autoencoder that compresses residual precipitation fields.

The encoder stacks three stages of two residual blocks plus a stride-2
downsampling convolution (spatial factor 8) and a final stage of two
residual blocks without downsampling. Because the target latent extent is
not a power-of-two fraction of the input, the feature map is interpolated
to the exact latent grid before the distribution head. The decoder mirrors
this: project in, residual stages with nearest-neighbor upsampling, and a
final interpolation to the exact output extent. The latent grid always
divides the input extent by 10 with 16 channels.

The posterior is diagonal Gaussian; ``encode`` records the noise draw so a
sample can be reproduced exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ValidationError

LATENT_CHANNELS = 16
LATENT_REDUCTION = 10


@dataclass
class LatentCode:
    """Posterior parameters and one recorded draw from it."""

    mu: torch.Tensor
    logvar: torch.Tensor
    sample: torch.Tensor
    eps: torch.Tensor


def latent_size(h: int, w: int) -> tuple:
    if h % LATENT_REDUCTION or w % LATENT_REDUCTION:
        raise ValidationError(
            f"field extent ({h}, {w}) must divide by {LATENT_REDUCTION} for the latent grid"
        )
    return h // LATENT_REDUCTION, w // LATENT_REDUCTION


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Mean per-element KL from N(mu, exp(logvar)) to the standard normal."""
    return torch.mean(0.5 * (mu * mu + torch.exp(logvar) - 1.0 - logvar))


def _norm(ch: int) -> nn.GroupNorm:
    groups = 8
    while ch % groups:
        groups //= 2
    return nn.GroupNorm(groups, ch)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.norm1 = _norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Encoder(nn.Module):
    def __init__(self, channels: tuple, latent_channels: int):
        super().__init__()
        c0, c1, c2, c3 = channels
        self.stem = nn.Conv2d(1, c0, 3, padding=1)
        self.stages = nn.ModuleList(
            [
                nn.Sequential(ResBlock(c0, c0), ResBlock(c0, c0)),
                nn.Sequential(ResBlock(c0, c1), ResBlock(c1, c1)),
                nn.Sequential(ResBlock(c1, c2), ResBlock(c2, c2)),
            ]
        )
        self.downs = nn.ModuleList(
            [
                nn.Conv2d(c0, c0, 3, stride=2, padding=1),
                nn.Conv2d(c1, c1, 3, stride=2, padding=1),
                nn.Conv2d(c2, c2, 3, stride=2, padding=1),
            ]
        )
        self.final = nn.Sequential(ResBlock(c2, c3), ResBlock(c3, c3))
        self.head = nn.Sequential(
            _norm(c3), nn.SiLU(), nn.Conv2d(c3, 2 * latent_channels, 3, padding=1)
        )

    def forward(self, x: torch.Tensor, latent_hw) -> torch.Tensor:
        h = self.stem(x)
        for stage, down in zip(self.stages, self.downs):
            h = down(stage(h))
        h = self.final(h)
        h = F.interpolate(h, size=tuple(latent_hw), mode="bilinear", align_corners=False)
        return self.head(h)


class Decoder(nn.Module):
    def __init__(self, channels: tuple, latent_channels: int):
        super().__init__()
        c0, c1, c2, c3 = channels
        self.conv_in = nn.Conv2d(latent_channels, c3, 3, padding=1)
        self.stage_in = nn.Sequential(ResBlock(c3, c3), ResBlock(c3, c2))
        self.stages = nn.ModuleList(
            [
                nn.Sequential(ResBlock(c2, c2), ResBlock(c2, c1)),
                nn.Sequential(ResBlock(c1, c1), ResBlock(c1, c0)),
                nn.Sequential(ResBlock(c0, c0), ResBlock(c0, c0)),
            ]
        )
        self.ups = nn.ModuleList([nn.Conv2d(c, c, 3, padding=1) for c in (c2, c1, c0)])
        self.head = nn.Sequential(_norm(c0), nn.SiLU(), nn.Conv2d(c0, 1, 3, padding=1))

    def forward(self, z: torch.Tensor, out_hw) -> torch.Tensor:
        h = self.stage_in(self.conv_in(z))
        for stage, up in zip(self.stages, self.ups):
            h = F.interpolate(h, scale_factor=2.0, mode="nearest")
            h = stage(up(h))
        h = F.interpolate(h, size=tuple(out_hw), mode="bilinear", align_corners=False)
        return self.head(h)


class ResidualVAE(nn.Module):
    """Encoder/decoder pair over single-channel residual fields."""

    def __init__(self, channels=(32, 48, 64, 64), latent_channels: int = LATENT_CHANNELS):
        super().__init__()
        if len(channels) != 4:
            raise ValidationError("vae needs four stage widths")
        self.latent_channels = latent_channels
        self.encoder = Encoder(tuple(channels), latent_channels)
        self.decoder = Decoder(tuple(channels), latent_channels)

    def encode(self, x: torch.Tensor, generator: torch.Generator | None = None) -> LatentCode:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValidationError("vae expects (B, 1, H, W) input")
        lh, lw = latent_size(x.shape[-2], x.shape[-1])
        moments = self.encoder(x, (lh, lw))
        mu, logvar = torch.chunk(moments, 2, dim=1)
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
        sample = mu + torch.exp(0.5 * logvar) * eps
        return LatentCode(mu=mu, logvar=logvar, sample=sample, eps=eps)

    def decode(self, z: torch.Tensor, out_hw) -> torch.Tensor:
        if z.dim() != 4 or z.shape[1] != self.latent_channels:
            raise ValidationError(f"latent must have {self.latent_channels} channels")
        lh, lw = latent_size(out_hw[0], out_hw[1])
        if tuple(z.shape[-2:]) != (lh, lw):
            raise ValidationError(
                f"latent extent {tuple(z.shape[-2:])} does not match output {tuple(out_hw)}"
            )
        return self.decoder(z, out_hw)
