"""Deterministic mesoscale precipitation model.

Surface variables (two consecutive timesteps, optionally with the feature
stack) and upper-air variables enter through patch embeddings: 4 x 4
spatially, and 2 x 4 x 4 over (level, lat, lon) for the upper stream. The
two token grids are concatenated along depth, run through the 3-D
shifted-window backbone, and decoded back to the full coarse grid by one of
two upsampler heads. Output is a single normalized-reflectivity field.

Two embedding variants: "standard" is a joint linear projection per stream;
"nonlinear" gives every variable its own convolution, then mixes variables
with a linear layer, with GELU after each step.

Two upsampler heads: "upsampler1" collapses token depth with a (D, 1, 1)
convolution, then interpolates up in two rounds with a convolution between
them; "upsampler2" replaces the plain decode with a deeper reconstruction
stack using LeakyReLU refinement convolutions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ValidationError
from .swin3d import SwinBackbone3d

SURFACE_PATCH = (4, 4)
UPPER_PATCH = (2, 4, 4)

EXPERIMENTS = {
    # loss, features, embedding, upsampler
    "baseline": ("mse", False, "standard", "upsampler1"),
    "d1": ("mse_ssim", False, "standard", "upsampler1"),
    "d2": ("mse_ssim", True, "standard", "upsampler1"),
    "d3": ("mse_ssim", True, "nonlinear", "upsampler1"),
    "d4": ("mse_ssim", True, "nonlinear", "upsampler2"),
}


@dataclass
class DetModelConfig:
    """Architecture switches for the deterministic model."""

    n_surface_channels: int      # dynamic surface vars x 2 timesteps (+ features)
    n_upper_channels: int        # upper vars x 2 timesteps
    n_levels: int
    grid_h: int
    grid_w: int
    embed_dim: int = 32
    depths: tuple = (3, 9, 3)
    heads: tuple = (4, 8, 4)
    window: tuple = (2, 6, 6)
    embedding: str = "standard"
    upsampler: str = "upsampler1"
    loss: str = "mse_ssim"
    lambda_mse: float = 0.5
    lambda_ssim: float = 1.5

    def __post_init__(self):
        if self.embedding not in ("standard", "nonlinear"):
            raise ValidationError(f"unknown embedding {self.embedding!r}")
        if self.upsampler not in ("upsampler1", "upsampler2"):
            raise ValidationError(f"unknown upsampler {self.upsampler!r}")
        if self.loss not in ("mse", "mse_ssim"):
            raise ValidationError(f"unknown loss {self.loss!r}")
        if tuple(self.depths) != (3, 9, 3):
            raise ValidationError("stage depths are fixed at (3, 9, 3)")
        if self.lambda_mse < 0 or self.lambda_ssim < 0:
            raise ValidationError("loss weights must be non-negative")

    @property
    def token_depth(self) -> int:
        return 1 + _ceil_div(self.n_levels, UPPER_PATCH[0])

    @property
    def token_h(self) -> int:
        return _ceil_div(self.grid_h, SURFACE_PATCH[0])

    @property
    def token_w(self) -> int:
        return _ceil_div(self.grid_w, SURFACE_PATCH[1])


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _pad_to_multiple_2d(x: torch.Tensor, ph: int, pw: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    return F.pad(x, (0, (pw - w % pw) % pw, 0, (ph - h % ph) % ph))


def _pad_to_multiple_3d(x: torch.Tensor, pd: int, ph: int, pw: int) -> torch.Tensor:
    d, h, w = x.shape[-3:]
    return F.pad(x, (0, (pw - w % pw) % pw, 0, (ph - h % ph) % ph, 0, (pd - d % pd) % pd))


class StandardEmbed(nn.Module):
    """Joint linear patch projection per stream."""

    def __init__(self, cfg: DetModelConfig):
        super().__init__()
        c = cfg.embed_dim
        self.surface = nn.Conv2d(cfg.n_surface_channels, c, SURFACE_PATCH, stride=SURFACE_PATCH)
        self.upper = nn.Conv3d(cfg.n_upper_channels, c, UPPER_PATCH, stride=UPPER_PATCH)

    def forward(self, surface: torch.Tensor, upper: torch.Tensor):
        s = self.surface(_pad_to_multiple_2d(surface, *SURFACE_PATCH))
        u = self.upper(_pad_to_multiple_3d(upper, *UPPER_PATCH))
        return s[:, :, None], u


class NonlinearEmbed(nn.Module):
    """Per-variable convolutions, GELU, linear variable mixing, GELU."""

    def __init__(self, cfg: DetModelConfig):
        super().__init__()
        c = cfg.embed_dim
        self.surface_convs = nn.ModuleList(
            nn.Conv2d(1, c, SURFACE_PATCH, stride=SURFACE_PATCH)
            for _ in range(cfg.n_surface_channels)
        )
        self.upper_convs = nn.ModuleList(
            nn.Conv3d(1, c, UPPER_PATCH, stride=UPPER_PATCH)
            for _ in range(cfg.n_upper_channels)
        )
        self.surface_mix = nn.Linear(cfg.n_surface_channels * c, c)
        self.upper_mix = nn.Linear(cfg.n_upper_channels * c, c)
        self.act = nn.GELU()

    def forward(self, surface: torch.Tensor, upper: torch.Tensor):
        surface = _pad_to_multiple_2d(surface, *SURFACE_PATCH)
        upper = _pad_to_multiple_3d(upper, *UPPER_PATCH)
        s = torch.cat(
            [conv(surface[:, i : i + 1]) for i, conv in enumerate(self.surface_convs)], dim=1
        )
        s = self.act(s)
        s = s.permute(0, 2, 3, 1)
        s = self.act(self.surface_mix(s)).permute(0, 3, 1, 2)
        u = torch.cat(
            [conv(upper[:, i : i + 1]) for i, conv in enumerate(self.upper_convs)], dim=1
        )
        u = self.act(u)
        u = u.permute(0, 2, 3, 4, 1)
        u = self.act(self.upper_mix(u)).permute(0, 4, 1, 2, 3)
        return s[:, :, None], u


def _up_hw(h: int, w: int):
    # midpoint-inserting upsample: n -> 2n - 1
    return 2 * h - 1, 2 * w - 1


class Upsampler1(nn.Module):
    """Depth-collapse convolution, two bilinear enlargements, light convs."""

    def __init__(self, dim: int, token_depth: int):
        super().__init__()
        self.collapse = nn.Conv3d(dim, dim, (token_depth, 1, 1))
        self.conv_mid = nn.Conv2d(dim, dim, 3, padding=1)
        self.head = nn.Conv2d(dim, 1, 3, padding=1)

    def forward(self, x: torch.Tensor, out_hw) -> torch.Tensor:
        x = self.collapse(x).squeeze(2)  # (B, C, h, w)
        h, w = x.shape[-2:]
        x = F.interpolate(x, size=_up_hw(h, w), mode="bilinear", align_corners=True)
        x = self.conv_mid(x)
        x = F.interpolate(x, size=tuple(out_hw), mode="bilinear", align_corners=True)
        return self.head(x)


class Upsampler2(nn.Module):
    """Reconstruction-style decoder: refinement convolutions around upsampling."""

    def __init__(self, dim: int, token_depth: int):
        super().__init__()
        self.collapse = nn.Conv3d(dim, dim, (token_depth, 1, 1))
        self.act_in = nn.GELU()
        self.conv_before = nn.Conv2d(dim, dim, 3, padding=1)
        self.conv_mid = nn.Conv2d(dim, dim, 3, padding=1)
        self.conv_hr = nn.Conv2d(dim, dim, 3, padding=1)
        self.head = nn.Conv2d(dim, 1, 3, padding=1)
        self.lrelu = nn.LeakyReLU(0.2, inplace=True)

    def forward(self, x: torch.Tensor, out_hw) -> torch.Tensor:
        x = self.act_in(self.collapse(x)).squeeze(2)
        x = self.lrelu(self.conv_before(x))
        h, w = x.shape[-2:]
        x = F.interpolate(x, size=_up_hw(h, w), mode="bilinear", align_corners=True)
        x = self.lrelu(self.conv_mid(x))
        x = F.interpolate(x, size=tuple(out_hw), mode="bilinear", align_corners=True)
        x = self.lrelu(self.conv_hr(x))
        return self.head(x)


class DetModel(nn.Module):
    """Embed -> 3-D swin backbone -> upsampler head -> (B, 1, H, W) norm field."""

    def __init__(self, cfg: DetModelConfig):
        super().__init__()
        self.cfg = cfg
        embed_cls = StandardEmbed if cfg.embedding == "standard" else NonlinearEmbed
        self.embed = embed_cls(cfg)
        self.backbone = SwinBackbone3d(
            cfg.embed_dim, depths=cfg.depths, heads=cfg.heads, window=cfg.window
        )
        up_cls = Upsampler1 if cfg.upsampler == "upsampler1" else Upsampler2
        self.upsampler = up_cls(cfg.embed_dim, cfg.token_depth)

    def forward(self, surface: torch.Tensor, upper: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if surface.shape[-2:] != (cfg.grid_h, cfg.grid_w):
            raise ValidationError(
                f"surface extent {tuple(surface.shape[-2:])} does not match grid "
                f"{(cfg.grid_h, cfg.grid_w)}"
            )
        if surface.shape[1] != cfg.n_surface_channels:
            raise ValidationError(
                f"expected {cfg.n_surface_channels} surface channels, got {surface.shape[1]}"
            )
        if upper.shape[1] != cfg.n_upper_channels or upper.shape[2] != cfg.n_levels:
            raise ValidationError("upper stream channel/level mismatch")
        s_tok, u_tok = self.embed(surface, upper)
        tokens = torch.cat([s_tok, u_tok], dim=2)  # concat along depth
        feats = self.backbone(tokens)
        return self.upsampler(feats, (cfg.grid_h, cfg.grid_w))

    def embed_tokens(self, surface: torch.Tensor, upper: torch.Tensor):
        """Expose the embedded streams for shape inspection."""
        s_tok, u_tok = self.embed(
            surface, upper
        )
        return s_tok, u_tok, torch.cat([s_tok, u_tok], dim=2)


def build_det_config(profile, experiment: str = "d4") -> DetModelConfig:
    """Config for one ablation row on a given profile."""
    if experiment not in EXPERIMENTS:
        raise ValidationError(f"unknown experiment {experiment!r}")
    loss, use_features, embedding, upsampler = EXPERIMENTS[experiment]
    n_feat = profile.n_features if use_features else 0
    return DetModelConfig(
        n_surface_channels=2 * profile.n_det_surface_vars + n_feat,
        n_upper_channels=2 * profile.n_upper_vars,
        n_levels=len(profile.levels),
        grid_h=profile.coarse.nlat,
        grid_w=profile.coarse.nlon,
        embed_dim=profile.det_embed_dim,
        heads=profile.det_heads,
        window=profile.det_window,
        embedding=embedding,
        upsampler=upsampler,
        loss=loss,
    )
