"""Member assembly: recombine mean and residual, draw members, match ranks.

Recombination adds the regridded coarse mean and a fine residual in
normalized reflectivity space, then walks back down the unit chain to rain
amounts. The sum is taken in float64 so a residual produced by
``decompose_residual`` reconstructs its fine field exactly, and a zero
residual reproduces the regridded mean exactly.

Probability matching transplants the pooled ensemble value distribution
onto the spatial rank order of the ensemble mean: pool all member values,
sort descending, keep every N-th starting from the largest, and hand them
out to cells sorted by descending ensemble mean (ties broken by cell
index, which makes the product bit-identical to the members when all
members agree).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .diffusion import NoiseSchedule, ddim_step, ddim_timesteps
from .errors import ValidationError
from .grid import (
    GridField,
    GridSpec,
    NormalizationStats,
    ResidualField,
    crop_region,
    denormalize_dbz,
    from_dbz,
    nearest_regrid,
)
from .profiles import Profile


@dataclass
class EnsembleSet:
    """Fine-grid members in mm sharing one grid and timestamp."""

    members: list
    base_seed: int
    member_seeds: list = field(default_factory=list)
    timestamp: object = None

    def __post_init__(self):
        if not self.members:
            raise ValidationError("ensemble needs at least one member")
        spec = self.members[0].spec
        for m in self.members:
            if m.spec != spec:
                raise ValidationError("ensemble members must share one grid")
            if m.unit_tag != "mm":
                raise ValidationError("ensemble members must be rain amounts")

    def __len__(self) -> int:
        return len(self.members)

    def stack(self) -> np.ndarray:
        return np.stack([m.values for m in self.members])

    def mean_field(self) -> GridField:
        return self.members[0]._with(self.stack().mean(axis=0), name="ens_mean")


def parent_window(fine: GridSpec, refinement: int) -> GridSpec:
    """Coarse window whose refinement by ``refinement`` is exactly ``fine``."""
    if int(refinement) != refinement or refinement < 1:
        raise ValidationError("refinement factor must be a positive integer")
    r = int(refinement)
    if fine.nlat % r or fine.nlon % r:
        raise ValidationError("fine extent does not divide by the refinement factor")
    return GridSpec(
        lat0=fine.lat0 + fine.dlat * (r - 1) / 2.0,
        lon0=fine.lon0 + fine.dlon * (r - 1) / 2.0,
        dlat=fine.dlat * r,
        dlon=fine.dlon * r,
        nlat=fine.nlat // r,
        nlon=fine.nlon // r,
    )


def recombine(
    mean_coarse_norm: GridField,
    residual: ResidualField,
    stats: NormalizationStats,
    refinement: int,
) -> GridField:
    """mean + residual in normalized reflectivity, inverted to mm.

    The mean field may cover a larger region than the residual; it is
    cropped to the residual's parent coarse window first. The whole
    inversion runs in float64 so a residual from ``decompose_residual``
    reconstructs its fine field to rounding error; the output is mm on the
    residual's fine grid and is never negative.
    """
    if mean_coarse_norm.unit_tag != "norm":
        raise ValidationError("recombine expects a normalized mean field")
    if mean_coarse_norm.values.ndim != 2:
        raise ValidationError("recombine expects a single 2-D mean field")
    window = parent_window(residual.spec, refinement)
    lats = window.lats
    lons = window.lons
    mean_crop = crop_region(
        mean_coarse_norm,
        (float(lats[0]), float(lats[-1]), float(lons[0]), float(lons[-1])),
    )
    if mean_crop.values.shape != (window.nlat, window.nlon):
        raise ValidationError("mean field does not align with the residual window")
    mean_fine = nearest_regrid(mean_crop, residual.spec)
    total = mean_fine.values.astype(np.float64) + residual.values
    norm = GridField(
        values=total,
        dims=("lat", "lon"),
        lat0=residual.lat0,
        lon0=residual.lon0,
        dlat=residual.dlat,
        dlon=residual.dlon,
        unit_tag="norm",
        name="tp",
        timestamp=mean_coarse_norm.timestamp,
    )
    return from_dbz(denormalize_dbz(norm, stats.dbz_scales["fine"]))


def _pm_values(stack: np.ndarray) -> np.ndarray:
    n = stack.shape[0]
    if n < 2:
        raise ValidationError("probability matching needs at least two members")
    pooled = np.sort(stack.reshape(n, -1).ravel())[::-1]
    selected = pooled[::n]
    mean = stack.mean(axis=0).ravel()
    order = np.argsort(-mean, kind="stable")
    out = np.empty_like(selected)
    out[order] = selected
    return out.reshape(stack.shape[1:])


def probability_match(ens: EnsembleSet) -> GridField:
    """Pooled-distribution product on the ensemble-mean rank order."""
    matched = _pm_values(ens.stack())
    return ens.members[0]._with(matched, name="pm")


def generate_members(
    mean_coarse_norm: GridField,
    cond: torch.Tensor,
    vae,
    denoiser,
    schedule: NoiseSchedule,
    stats: NormalizationStats,
    profile: Profile,
    *,
    latent_shift: torch.Tensor,
    latent_scale: torch.Tensor,
    n_members: int | None = None,
    base_seed: int = 0,
    steps: int | None = None,
    timestamp=None,
) -> EnsembleSet:
    """Sample an ensemble of fine-grid rain fields for one condition.

    Members differ only in their seeded initial latent draw (member i uses
    ``base_seed + i``); the denoising ladder, decoder, and recombination
    are deterministic, so the whole set reproduces from ``base_seed``. All
    members are denoised in one batch down a shared step ladder.
    """
    if cond.dim() != 4 or cond.shape[0] != 1:
        raise ValidationError("condition must be a single (1, C, H, W) stack")
    n = profile.members if n_members is None else int(n_members)
    if n < 1:
        raise ValidationError("need at least one ensemble member")
    steps = profile.ddim_steps if steps is None else int(steps)
    fine = profile.fine
    lh, lw = profile.latent_hw
    shift = latent_shift.reshape(1, -1, 1, 1).to(torch.float32)
    scale = latent_scale.reshape(1, -1, 1, 1).to(torch.float32)

    member_seeds = [base_seed + i for i in range(n)]
    draws = []
    for seed in member_seeds:
        g = torch.Generator()
        g.manual_seed(seed)
        draws.append(torch.randn(1, vae.latent_channels, lh, lw, generator=g))
    z = torch.cat(draws, dim=0)

    vae.eval()
    denoiser.eval()
    cond_rep = cond.expand(n, -1, -1, -1)
    ladder = ddim_timesteps(schedule.timesteps, steps)
    with torch.no_grad():
        for t, t_prev in zip(ladder[:-1], ladder[1:]):
            eps_hat = denoiser(z, t, cond_rep)
            z = ddim_step(z, eps_hat, t, t_prev, schedule)
        decoded = vae.decode(z * scale + shift, (fine.nlat, fine.nlon))

    lats = fine.lats
    lons = fine.lons
    bounds = (float(lats[0]), float(lats[-1]), float(lons[0]), float(lons[-1]))
    members = []
    for i in range(n):
        residual = ResidualField(
            values=decoded[i, 0].numpy().astype(np.float64),
            lat0=fine.lat0,
            lon0=fine.lon0,
            dlat=fine.dlat,
            dlon=fine.dlon,
            bounds=bounds,
        )
        members.append(recombine(mean_coarse_norm, residual, stats, profile.refinement))
    return EnsembleSet(
        members=members,
        base_seed=base_seed,
        member_seeds=member_seeds,
        timestamp=timestamp,
    )
