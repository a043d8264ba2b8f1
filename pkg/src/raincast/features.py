"""Static and temporal per-cell input channels.

Nine channels: a land-sea mask, surface geopotential, soil type (min-max
scaled to [0, 1]), latitude and longitude in radians, sine/cosine of local
time of day, and sine/cosine of year progress. The three physical fields
have no external source here, so they are fixed analytic functions of the
grid coordinates: deterministic, reproducible, and bounded.
"""
from __future__ import annotations

import math
from datetime import datetime

import numpy as np

from .grid import GridSpec

FEATURE_NAMES = (
    "land_sea_mask",
    "surface_geopotential",
    "soil_type",
    "lat_rad",
    "lon_rad",
    "tod_sin",
    "tod_cos",
    "year_sin",
    "year_cos",
)

N_SOIL_TYPES = 8


def _terrain(latr: np.ndarray, lonr: np.ndarray):
    mask = (np.sin(2.1 * latr) + np.cos(1.7 * lonr) + 0.3 * np.sin(3.3 * lonr + 1.0)) > 0.25
    mask = mask.astype(np.float64)
    geo = 0.5 + 0.5 * np.sin(1.3 * latr + 0.7) * np.cos(2.2 * lonr - 0.4)
    geo = geo * mask  # sea stays at zero elevation
    soil_raw = 0.5 + 0.5 * np.sin(4.1 * latr) * np.cos(3.5 * lonr)
    codes = np.clip(np.floor(soil_raw * N_SOIL_TYPES), 0, N_SOIL_TYPES - 1)
    soil = (codes / (N_SOIL_TYPES - 1)) * mask
    return mask, geo, soil


def local_hour(utc: datetime, lon_deg: np.ndarray) -> np.ndarray:
    """Local solar hour: UTC shifted by 15 degrees of longitude per hour."""
    utc_hours = utc.hour + utc.minute / 60.0 + utc.second / 3600.0
    return np.mod(utc_hours + np.asarray(lon_deg) / 15.0, 24.0)


def year_progress(utc: datetime) -> float:
    """Fraction of the year elapsed at this timestamp."""
    day = utc.timetuple().tm_yday - 1
    frac_day = (utc.hour + utc.minute / 60.0 + utc.second / 3600.0) / 24.0
    return (day + frac_day) / 365.25


def build_features(spec: GridSpec, timestamp: datetime) -> np.ndarray:
    """Assemble the (9, H, W) float32 channel stack for one timestamp."""
    lats = spec.lats
    lons = spec.lons
    latr = np.deg2rad(lats)[:, None] * np.ones((1, spec.nlon))
    lonr = np.ones((spec.nlat, 1)) * np.deg2rad(lons)[None, :]

    mask, geo, soil = _terrain(latr, lonr)

    lh = local_hour(timestamp, lons)[None, :] * np.ones((spec.nlat, 1))
    tod_angle = 2.0 * math.pi * lh / 24.0
    yp_angle = 2.0 * math.pi * year_progress(timestamp)

    stack = np.stack(
        [
            mask,
            geo,
            soil,
            latr,
            lonr,
            np.sin(tod_angle),
            np.cos(tod_angle),
            np.full_like(mask, math.sin(yp_angle)),
            np.full_like(mask, math.cos(yp_angle)),
        ]
    )
    return stack.astype(np.float32)
