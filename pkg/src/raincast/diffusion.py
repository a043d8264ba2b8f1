"""Denoising diffusion over latent fields: schedule, noising, DDIM reversal.

Timesteps are 1-based: t runs over [1, T] and t = 0 denotes the clean
sample, so ``alpha_bar(0) == 1.0`` exactly. Tables are kept in float64;
per-sample lookups broadcast against the trailing dimensions of the data.

Sampling is the deterministic DDIM variant (eta = 0): all randomness comes
from the initial latent draw, so a seed fully determines the sample.
"""
from __future__ import annotations

import torch

from .errors import ValidationError

DEFAULT_TIMESTEPS = 1000
DEFAULT_DDIM_STEPS = 300
BETA_START = 1e-4
BETA_END = 0.02


class NoiseSchedule:
    """Beta/alpha tables for a fixed number of diffusion steps."""

    def __init__(self, betas: torch.Tensor):
        betas = torch.as_tensor(betas, dtype=torch.float64).flatten()
        if betas.numel() < 1:
            raise ValidationError("schedule needs at least one step")
        if not bool(((betas > 0) & (betas < 1)).all()):
            raise ValidationError("betas must lie strictly inside (0, 1)")
        self.betas = betas
        self.alphas = 1.0 - betas
        alpha_bars = torch.cumprod(self.alphas, dim=0)
        if not bool((alpha_bars[1:] < alpha_bars[:-1]).all()):
            raise ValidationError("alpha_bar must be strictly decreasing")
        # index 0 holds the t=0 (clean) value so lookups are just table[t]
        self._alpha_bar_table = torch.cat(
            [torch.ones(1, dtype=torch.float64), alpha_bars]
        )

    @property
    def timesteps(self) -> int:
        return int(self.betas.numel())

    def _check_t(self, t, lo: int):
        t = torch.as_tensor(t)
        if not bool(((t >= lo) & (t <= self.timesteps)).all()):
            raise ValidationError(
                f"timestep out of range [{lo}, {self.timesteps}]"
            )
        return t.long()

    def alpha_bar(self, t):
        """Cumulative alpha at step t; t may be an int or an integer tensor."""
        idx = self._check_t(t, lo=0)
        out = self._alpha_bar_table[idx]
        return float(out) if idx.dim() == 0 else out

    def beta(self, t):
        idx = self._check_t(t, lo=1) - 1
        out = self.betas[idx]
        return float(out) if idx.dim() == 0 else out

    def alpha(self, t):
        idx = self._check_t(t, lo=1) - 1
        out = self.alphas[idx]
        return float(out) if idx.dim() == 0 else out


def make_schedule(timesteps: int = DEFAULT_TIMESTEPS, kind: str = "linear") -> NoiseSchedule:
    if timesteps < 1:
        raise ValidationError("timesteps must be >= 1")
    if kind != "linear":
        raise ValidationError(f"unknown schedule kind {kind!r}")
    betas = torch.linspace(BETA_START, BETA_END, timesteps, dtype=torch.float64)
    return NoiseSchedule(betas)


def _broadcast_bar(schedule: NoiseSchedule, t, ref: torch.Tensor) -> torch.Tensor:
    bar = schedule.alpha_bar(t)
    if not torch.is_tensor(bar):
        bar = torch.tensor(bar, dtype=torch.float64)
    shape = (-1,) + (1,) * (ref.dim() - 1)
    return bar.reshape(shape).to(ref.dtype)


def forward_noise(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if eps.shape != z0.shape:
        raise ValidationError("noise must match the sample shape")
    bar = _broadcast_bar(schedule, t, z0)
    return torch.sqrt(bar) * z0 + torch.sqrt(1.0 - bar) * eps


def diffusion_loss(denoise_fn, z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between the true and predicted noise."""
    z_t = forward_noise(z0, t, eps, schedule)
    eps_hat = denoise_fn(z_t, t)
    if eps_hat.shape != eps.shape:
        raise ValidationError("denoiser output must match the noise shape")
    return torch.mean((eps - eps_hat) ** 2)


def ddim_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, schedule: NoiseSchedule) -> torch.Tensor:
    """One deterministic reverse jump from step t to an earlier step t_prev."""
    t = int(t)
    t_prev = int(t_prev)
    if not 1 <= t <= schedule.timesteps:
        raise ValidationError(f"t must lie in [1, {schedule.timesteps}]")
    if not 0 <= t_prev <= t:
        raise ValidationError("t_prev must lie in [0, t]")
    if t_prev == t:
        return z_t
    bar_t = schedule.alpha_bar(t)
    bar_p = schedule.alpha_bar(t_prev)
    x0_hat = (z_t - (1.0 - bar_t) ** 0.5 * eps_hat) / bar_t**0.5
    return bar_p**0.5 * x0_hat + (1.0 - bar_p) ** 0.5 * eps_hat


def ddim_timesteps(total: int, steps: int) -> list:
    """Strictly decreasing visit sequence total = t_0 > ... > t_steps = 0."""
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    if steps > total:
        raise ValidationError("steps cannot exceed the schedule length")
    ts = [round(total - i * total / steps) for i in range(steps + 1)]
    if ts[0] != total or ts[-1] != 0 or any(a <= b for a, b in zip(ts, ts[1:])):
        raise ValidationError("failed to build a strictly decreasing timestep ladder")
    return ts


def ddim_sample(
    denoise_fn,
    shape,
    schedule: NoiseSchedule,
    steps: int = DEFAULT_DDIM_STEPS,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Draw a latent by reversing the schedule along a uniform step ladder."""
    z = torch.randn(tuple(shape), generator=generator, dtype=dtype)
    ladder = ddim_timesteps(schedule.timesteps, steps)
    for t, t_prev in zip(ladder[:-1], ladder[1:]):
        eps_hat = denoise_fn(z, t)
        z = ddim_step(z, eps_hat, t, t_prev, schedule)
    return z
