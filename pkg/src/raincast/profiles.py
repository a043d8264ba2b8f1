"""Run profiles: grid geometry plus model sizing for each scale.

Two registered profiles. "desk" is small enough to train and verify on a
laptop CPU in minutes; "full" is the operational scale (0.25-degree coarse
grid over 241 x 281 cells with 13 pressure levels, 900 x 1400 fine grid)
and is only instantiated end-to-end for shape checks, not trained here.

The fine grid is always the residual window of the coarse grid refined by
an integer factor, and the latent grid divides the fine grid by a fixed
factor of 10.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import yaml

from .errors import ConfigurationError, ValidationError
from .grid import GridSpec


@dataclass(frozen=True)
class Profile:
    name: str
    coarse: GridSpec
    levels: tuple
    residual_box: tuple        # (row0, col0, nrows, ncols) on the coarse grid
    condition_box: tuple
    refinement: int
    n_det_surface_vars: int = 4
    n_cond_surface_vars: int = 5   # adds accumulated precipitation
    n_upper_vars: int = 5
    n_features: int = 9
    det_embed_dim: int = 32
    det_heads: tuple = (4, 8, 4)
    det_window: tuple = (2, 6, 6)
    vae_channels: tuple = (32, 64, 96, 96)
    latent_channels: int = 16
    latent_reduction: int = 10
    dit_dim: int = 128
    dit_depth: int = 4
    dit_heads: int = 4
    cond_patch: int = 4
    latent_patch: int = 2
    members: int = 11
    ddim_steps: int = 300
    diffusion_timesteps: int = 1000

    def __post_init__(self):
        self.coarse.window(*self.residual_box)
        self.coarse.window(*self.condition_box)
        fine = self.fine
        if fine.nlat % self.latent_reduction or fine.nlon % self.latent_reduction:
            raise ValidationError(
                "fine extent must divide evenly by the latent reduction factor"
            )
        if self.members < 1:
            raise ValidationError("need at least one ensemble member")

    @property
    def residual_coarse(self) -> GridSpec:
        return self.coarse.window(*self.residual_box)

    @property
    def condition_coarse(self) -> GridSpec:
        return self.coarse.window(*self.condition_box)

    @property
    def fine(self) -> GridSpec:
        return self.residual_coarse.refine(self.refinement)

    @property
    def latent_hw(self) -> tuple:
        f = self.fine
        return (f.nlat // self.latent_reduction, f.nlon // self.latent_reduction)


DESK = Profile(
    name="desk",
    coarse=GridSpec(lat0=15.0, lon0=100.0, dlat=1.0, dlon=1.0, nlat=25, nlon=35),
    levels=(200.0, 400.0, 500.0, 700.0, 850.0),
    residual_box=(2, 3, 20, 28),
    condition_box=(2, 3, 20, 28),
    refinement=5,
    det_embed_dim=32,
    det_heads=(4, 8, 4),
    det_window=(2, 3, 3),
    vae_channels=(32, 48, 64, 64),
    dit_dim=128,
    dit_depth=4,
    dit_heads=4,
)

FULL = Profile(
    name="full",
    coarse=GridSpec(lat0=0.0, lon0=70.0, dlat=0.25, dlon=0.25, nlat=241, nlon=281),
    levels=(50.0, 100.0, 150.0, 200.0, 250.0, 300.0, 400.0, 500.0, 600.0, 700.0, 850.0, 925.0, 1000.0),
    residual_box=(60, 0, 180, 280),
    condition_box=(60, 0, 181, 241),
    refinement=5,
    det_embed_dim=96,
    det_heads=(4, 8, 4),
    det_window=(2, 6, 6),
    vae_channels=(32, 64, 96, 96),
    dit_dim=384,
    dit_depth=8,
    dit_heads=6,
)

PROFILES = {"desk": DESK, "full": FULL}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown profile {name!r}; available: {sorted(PROFILES)}"
        ) from None


def load_config_file(path) -> dict:
    """Read a nested key-value config; empty file means no overrides."""
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError("config file must hold a mapping")
    return data


def merge_overrides(base: dict, *layers) -> dict:
    """Right-most wins, recursing into nested mappings."""
    out = dict(base)
    for layer in layers:
        for k, v in (layer or {}).items():
            if isinstance(v, dict) and isinstance(out.get(k), dict):
                out[k] = merge_overrides(out[k], v)
            else:
                out[k] = v
    return out
