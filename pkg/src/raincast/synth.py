"""Synthetic weather generator for desk-scale runs and tests.

Precipitation comes from Gaussian storm cells advected by a synthetic
steering wind. The coarse field evaluates the storm envelope at coarse cell
centers; the fine field evaluates the same envelope on the refined grid and
modulates it with smoothed multiplicative noise, so pooling the fine field
recovers the coarse pattern and zero storms mean zero rain everywhere.
Atmospheric variables are physically coupled: humidity peaks under rain,
pressure dips at storm centers, the wind matches the advection, and
temperature carries a diurnal cycle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ValidationError
from .features import build_features
from .grid import SURFACE_VARS, TP_VAR, UPPER_VARS, AtmosphericState, GridField, GridSpec


@dataclass
class SynthConfig:
    """Geometry and storm statistics for one synthetic run."""

    coarse: GridSpec
    levels: tuple
    crop_box: tuple            # (row0, col0, nrows, ncols) on the coarse grid
    refinement: int
    n_times: int = 24
    n_storms: int = 4
    start: datetime = field(default_factory=lambda: datetime(2021, 7, 1, 0))
    noise_amp: float = 0.35
    noise_sigma: float = 3.0   # smoothing radius of fine-scale noise, fine cells

    def __post_init__(self):
        if self.n_times < 2:
            raise ValidationError("need at least two timesteps")
        if self.n_storms < 0:
            raise ValidationError("storm count cannot be negative")
        r0, c0, nr, nc = self.crop_box
        if r0 < 0 or c0 < 0 or r0 + nr > self.coarse.nlat or c0 + nc > self.coarse.nlon:
            raise ValidationError("crop box exceeds the coarse grid")

    @property
    def crop_spec(self) -> GridSpec:
        r0, c0, nr, nc = self.crop_box
        return self.coarse.window(r0, c0, nr, nc)

    @property
    def fine(self) -> GridSpec:
        return self.crop_spec.refine(self.refinement)


@dataclass
class SynthData:
    states: list
    tp_coarse: GridField      # (time, lat, lon), mm
    tp_fine: GridField        # (time, lat, lon), mm
    timestamps: list


def _storm_params(rng: np.random.Generator, cfg: SynthConfig):
    crop = cfg.crop_spec
    lat_lo, lat_hi = crop.lats[0], crop.lats[-1]
    lon_lo, lon_hi = crop.lons[0], crop.lons[-1]
    pad_lat = 0.15 * (lat_hi - lat_lo)
    pad_lon = 0.15 * (lon_hi - lon_lo)
    n = cfg.n_storms
    return {
        "lat": rng.uniform(lat_lo + pad_lat, lat_hi - pad_lat, n),
        "lon": rng.uniform(lon_lo + pad_lon, lon_hi - pad_lon, n),
        "amp": rng.uniform(3.0, 14.0, n),
        "sig_lat": rng.uniform(1.6, 3.2, n) * cfg.coarse.dlat,
        "sig_lon": rng.uniform(1.6, 3.2, n) * cfg.coarse.dlon,
        "u": rng.uniform(-0.35, 0.35, n) * cfg.coarse.dlon,  # deg per hour
        "v": rng.uniform(-0.25, 0.25, n) * cfg.coarse.dlat,
        "pulse": rng.uniform(0.0, 2 * math.pi, n),
    }


def _envelope(storms, t: float, lats: np.ndarray, lons: np.ndarray) -> np.ndarray:
    """Sum of drifting Gaussian bumps evaluated on a lat/lon mesh, in mm."""
    out = np.zeros((lats.size, lons.size))
    glat = lats[:, None]
    glon = lons[None, :]
    for k in range(storms["lat"].size):
        clat = storms["lat"][k] + storms["v"][k] * t
        clon = storms["lon"][k] + storms["u"][k] * t
        pulse = 0.75 + 0.25 * math.sin(0.35 * t + storms["pulse"][k])
        d2 = ((glat - clat) / storms["sig_lat"][k]) ** 2 + (
            (glon - clon) / storms["sig_lon"][k]
        ) ** 2
        out += storms["amp"][k] * pulse * np.exp(-0.5 * d2)
    return out


def _smooth_unit_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    raw = rng.standard_normal(shape)
    sm = gaussian_filter(raw, sigma=sigma, mode="reflect")
    sd = sm.std()
    return sm / sd if sd > 0 else sm


def synth_generate(seed: int, cfg: SynthConfig) -> SynthData:
    """Generate a full synthetic series. Identical seeds give identical data."""
    rng = np.random.default_rng(seed)
    storms = _storm_params(rng, cfg)
    coarse = cfg.coarse
    fine = cfg.fine
    nt = cfg.n_times

    tp_coarse = np.zeros((nt, coarse.nlat, coarse.nlon), dtype=np.float32)
    tp_fine = np.zeros((nt, fine.nlat, fine.nlon), dtype=np.float32)
    timestamps = [cfg.start + timedelta(hours=h) for h in range(nt)]

    # slowly drifting background flow shared by wind fields and storms
    base_u = rng.uniform(1.0, 4.0)
    base_v = rng.uniform(-1.5, 1.5)
    t2m_noise = _smooth_unit_noise(rng, (coarse.nlat, coarse.nlon), 2.0)

    states = []
    latc = coarse.lats
    lonc = coarse.lons
    latr = np.deg2rad(latc)[:, None]

    for ti in range(nt):
        env_c = _envelope(storms, float(ti), latc, lonc)
        env_f = _envelope(storms, float(ti), fine.lats, fine.lons)
        noise = _smooth_unit_noise(rng, (fine.nlat, fine.nlon), cfg.noise_sigma)
        fine_vals = env_f * np.clip(1.0 + cfg.noise_amp * noise, 0.0, None)
        tp_coarse[ti] = env_c.astype(np.float32)
        tp_fine[ti] = fine_vals.astype(np.float32)

        env_norm = env_c / (env_c.max() + 1e-6)
        hour = timestamps[ti].hour + timestamps[ti].minute / 60.0
        diurnal = np.sin(2 * math.pi * (hour + lonc[None, :] / 15.0) / 24.0)

        t2m = 302.0 - 14.0 * np.sin(latr) ** 2 + 3.0 * diurnal + 1.5 * t2m_noise - 2.0 * env_norm
        u10 = base_u + 1.2 * np.sin(latr * 3.0) + 0.8 * env_norm * np.ones_like(t2m)
        v10 = base_v + 0.9 * np.cos(np.deg2rad(lonc))[None, :] * np.ones_like(t2m)
        mslp = 101300.0 - 450.0 * env_norm + 120.0 * np.sin(latr * 2.0)
        tp_c = env_c

        surface = np.stack([t2m, u10, v10, mslp, tp_c]).astype(np.float32)

        nlev = len(cfg.levels)
        upper = np.zeros((len(UPPER_VARS), nlev, coarse.nlat, coarse.nlon), dtype=np.float32)
        for li, p in enumerate(cfg.levels):
            depth = math.log(1000.0 / p)  # grows with height
            upper[0, li] = (t2m * 0.0 + 9.81 * 7000.0 * depth + 600.0 * np.sin(latr * 2.0)).astype(
                np.float32
            )  # z
            upper[1, li] = (t2m - 55.0 * depth).astype(np.float32)  # t
            upper[2, li] = (u10 + 5.5 * depth).astype(np.float32)  # u
            upper[3, li] = (v10 + 1.2 * depth).astype(np.float32)  # v
            moist = math.exp(-1.1 * depth)
            upper[4, li] = (
                (0.004 + 0.012 * env_norm) * moist  # humidity peaks under rain
            ).astype(np.float32)  # sh

        feats = build_features(coarse, timestamps[ti])
        states.append(
            AtmosphericState(
                surface=surface,
                surface_vars=SURFACE_VARS + (TP_VAR,),
                upper=upper,
                upper_vars=UPPER_VARS,
                levels=cfg.levels,
                lat0=coarse.lat0,
                lon0=coarse.lon0,
                dlat=coarse.dlat,
                dlon=coarse.dlon,
                timestamp=timestamps[ti],
                features=feats,
            )
        )

    def mkgrid(vals, spec):
        return GridField(
            values=vals,
            dims=("time", "lat", "lon"),
            lat0=spec.lat0,
            lon0=spec.lon0,
            dlat=spec.dlat,
            dlon=spec.dlon,
            unit_tag="mm",
            name=TP_VAR,
            timestamp=cfg.start,
        )

    return SynthData(
        states=states,
        tp_coarse=mkgrid(tp_coarse, coarse),
        tp_fine=mkgrid(tp_fine, fine),
        timestamps=timestamps,
    )
