"""Transformer denoiser for latent diffusion, conditioned on atmospheric state.

The noisy latent is patchified with 2x2 patches and the condition (surface
variables including precipitation plus upper-air variables flattened over
levels) with 4x4 patches through a per-variable nonlinear embedding. The
condition token grid is bilinearly resized to the latent token grid, the two
are concatenated along channels and projected, and a stack of self-attention
blocks modulated by the timestep embedding (adaptive layer norm with
zero-initialized gates) predicts the noise. The output head is
zero-initialized, so an untrained model predicts exactly zero noise.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ValidationError


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of shape (B, dim) for integer timesteps."""
    if dim % 2:
        raise ValidationError("timestep embedding dim must be even")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half
    )
    args = t.float().reshape(-1, 1) * freqs.reshape(1, -1)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def sincos_pos_embed(dim: int, h: int, w: int) -> torch.Tensor:
    """Fixed 2D sine/cosine position table of shape (h*w, dim)."""
    if dim % 4:
        raise ValidationError("position embedding dim must divide by 4")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float32) / quarter)

    def axis(pos: torch.Tensor) -> torch.Tensor:
        out = pos.reshape(-1, 1) * omega.reshape(1, -1)
        return torch.cat([torch.sin(out), torch.cos(out)], dim=-1)

    rows = axis(torch.arange(h, dtype=torch.float32))
    cols = axis(torch.arange(w, dtype=torch.float32))
    rows = rows[:, None, :].expand(h, w, dim // 2)
    cols = cols[None, :, :].expand(h, w, dim // 2)
    return torch.cat([rows, cols], dim=-1).reshape(h * w, dim)


def _pad_to_multiple(x: torch.Tensor, patch: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    ph = (-h) % patch
    pw = (-w) % patch
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph))
    return x


class CondEmbed2d(nn.Module):
    """Per-variable patch convolutions with nonlinear mixing across variables."""

    def __init__(self, n_channels: int, dim: int, patch: int):
        super().__init__()
        self.patch = patch
        self.convs = nn.ModuleList(
            [nn.Conv2d(1, dim, patch, stride=patch) for _ in range(n_channels)]
        )
        self.mix = nn.Linear(n_channels * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = _pad_to_multiple(x, self.patch)
        parts = [F.gelu(conv(x[:, i : i + 1])) for i, conv in enumerate(self.convs)]
        stacked = torch.cat(parts, dim=1).permute(0, 2, 3, 1)
        return F.gelu(self.mix(stacked)).permute(0, 3, 1, 2)


def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class DiTBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim)
        )
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        nn.init.zeros_(self.modulation[-1].weight)
        nn.init.zeros_(self.modulation[-1].bias)

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        mods = self.modulation(t_emb).chunk(6, dim=-1)
        shift1, scale1, gate1, shift2, scale2, gate2 = mods
        h = _modulate(self.norm1(x), shift1, scale1)
        attn_out, _ = self.attn(h, h, h, need_weights=False)
        x = x + gate1.unsqueeze(1) * attn_out
        h = _modulate(self.norm2(x), shift2, scale2)
        return x + gate2.unsqueeze(1) * self.mlp(h)


class FinalLayer(nn.Module):
    def __init__(self, dim: int, patch: int, out_channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))
        self.linear = nn.Linear(dim, patch * patch * out_channels)
        nn.init.zeros_(self.modulation[-1].weight)
        nn.init.zeros_(self.modulation[-1].bias)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        shift, scale = self.modulation(t_emb).chunk(2, dim=-1)
        return self.linear(_modulate(self.norm(x), shift, scale))


class DiTDenoiser(nn.Module):
    """Noise predictor over latent fields with channel-concatenated conditioning."""

    def __init__(
        self,
        latent_channels: int,
        latent_hw,
        cond_channels: int,
        cond_hw,
        dim: int = 128,
        depth: int = 4,
        heads: int = 4,
        cond_patch: int = 4,
        latent_patch: int = 2,
    ):
        super().__init__()
        lh, lw = latent_hw
        if lh % latent_patch or lw % latent_patch:
            raise ValidationError(
                f"latent extent ({lh}, {lw}) must divide by patch {latent_patch}"
            )
        self.latent_channels = latent_channels
        self.latent_hw = (lh, lw)
        self.cond_channels = cond_channels
        self.cond_hw = (int(cond_hw[0]), int(cond_hw[1]))
        self.latent_patch = latent_patch
        self.token_hw = (lh // latent_patch, lw // latent_patch)

        self.latent_embed = nn.Conv2d(latent_channels, dim, latent_patch, stride=latent_patch)
        self.cond_embed = CondEmbed2d(cond_channels, dim, cond_patch)
        self.joint = nn.Linear(2 * dim, dim)
        self.t_mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.register_buffer(
            "pos_embed", sincos_pos_embed(dim, *self.token_hw), persistent=False
        )
        self.blocks = nn.ModuleList([DiTBlock(dim, heads) for _ in range(depth)])
        self.final = FinalLayer(dim, latent_patch, latent_channels)

    def _timesteps(self, t, batch: int) -> torch.Tensor:
        if torch.is_tensor(t):
            t = t.flatten()
            if t.numel() == 1:
                t = t.expand(batch)
            if t.numel() != batch:
                raise ValidationError("timestep batch does not match the latent batch")
            return t
        return torch.full((batch,), float(t))

    def forward(self, z_t: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
        if z_t.dim() != 4 or z_t.shape[1] != self.latent_channels or tuple(z_t.shape[-2:]) != self.latent_hw:
            raise ValidationError(
                f"latent must be (B, {self.latent_channels}, {self.latent_hw[0]}, {self.latent_hw[1]})"
            )
        if cond.dim() != 4 or cond.shape[1] != self.cond_channels or tuple(cond.shape[-2:]) != self.cond_hw:
            raise ValidationError(
                f"condition must be (B, {self.cond_channels}, {self.cond_hw[0]}, {self.cond_hw[1]})"
            )
        if cond.shape[0] != z_t.shape[0]:
            raise ValidationError("latent and condition batches differ")

        batch = z_t.shape[0]
        th, tw = self.token_hw
        lat = self.latent_embed(z_t)
        cnd = self.cond_embed(cond)
        if cnd.shape[-2:] != lat.shape[-2:]:
            cnd = F.interpolate(cnd, size=(th, tw), mode="bilinear", align_corners=False)
        x = torch.cat([lat, cnd], dim=1).flatten(2).transpose(1, 2)
        x = self.joint(x) + self.pos_embed.unsqueeze(0)

        t_emb = self.t_mlp(timestep_embedding(self._timesteps(t, batch), x.shape[-1]))
        for block in self.blocks:
            x = block(x, t_emb)
        x = self.final(x, t_emb)

        p = self.latent_patch
        x = x.reshape(batch, th, tw, p, p, self.latent_channels)
        x = x.permute(0, 5, 1, 3, 2, 4)
        return x.reshape(batch, self.latent_channels, th * p, tw * p)


def build_dit(profile) -> DiTDenoiser:
    cond_spec = profile.condition_coarse
    cond_channels = profile.n_cond_surface_vars + profile.n_upper_vars * len(profile.levels)
    return DiTDenoiser(
        latent_channels=profile.latent_channels,
        latent_hw=profile.latent_hw,
        cond_channels=cond_channels,
        cond_hw=(cond_spec.nlat, cond_spec.nlon),
        dim=profile.dit_dim,
        depth=profile.dit_depth,
        heads=profile.dit_heads,
        cond_patch=profile.cond_patch,
        latent_patch=profile.latent_patch,
    )
