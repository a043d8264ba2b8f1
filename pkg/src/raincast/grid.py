"""Gridded fields, the precipitation unit chain, and spatial operators.

Unit chain for precipitation:

    mm  --to_dbz-->  dbz  --normalize_dbz-->  norm
    mm  <--from_dbz--  dbz  <--denormalize_dbz--  norm

``to_dbz`` applies dBZ = 10 * log10(200 * TP**1.6) per cell. Rain below a
drizzle threshold (``TP_FLOOR_MM``) carries no usable signal and is floored
to ``DBZ_FLOOR``; ``from_dbz`` maps anything at or below that floor back to
0 mm. The normalization scale is the time-mean of the per-field spatial
maxima, so normalized values are near [0, 1] but are intentionally not
clamped.

Data rides through files as float32. Residual fields are kept in float64:
the float64 difference of two in-range float32 fields is exact, which makes
the mean + residual reconstruction bit-for-bit (see ``decompose_residual``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from datetime import datetime

import numpy as np

from .errors import ConfigurationError, ValidationError

UNIT_TAGS = ("mm", "dbz", "norm", "raw")

TP_FLOOR_MM = 0.01
DBZ_FLOOR = 0.0

# Variable name order used throughout: four dynamic surface variables, an
# optional accumulated-precipitation channel, five upper-air variables.
SURFACE_VARS = ("t2m", "u10", "v10", "mslp")
TP_VAR = "tp"
UPPER_VARS = ("z", "t", "u", "v", "sh")


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a regular lat/lon grid: origin cell center and spacing."""

    lat0: float
    lon0: float
    dlat: float
    dlon: float
    nlat: int
    nlon: int

    def __post_init__(self):
        if self.dlat <= 0 or self.dlon <= 0:
            raise ValidationError("grid spacing must be positive")
        if self.nlat < 1 or self.nlon < 1:
            raise ValidationError("grid extent must be at least 1x1")

    @property
    def lats(self) -> np.ndarray:
        return self.lat0 + self.dlat * np.arange(self.nlat)

    @property
    def lons(self) -> np.ndarray:
        return self.lon0 + self.dlon * np.arange(self.nlon)

    def refine(self, factor: int) -> "GridSpec":
        """Spec of the grid that subdivides every cell into factor x factor.

        Cell centers of the refined grid tile the original cells, so nearest
        regridding onto it replicates each source cell into a block.
        """
        if int(factor) != factor or factor < 1:
            raise ValidationError("refinement factor must be a positive integer")
        f = int(factor)
        return GridSpec(
            lat0=self.lat0 - self.dlat / 2 + self.dlat / (2 * f),
            lon0=self.lon0 - self.dlon / 2 + self.dlon / (2 * f),
            dlat=self.dlat / f,
            dlon=self.dlon / f,
            nlat=self.nlat * f,
            nlon=self.nlon * f,
        )

    def window(self, row0: int, col0: int, nrows: int, ncols: int) -> "GridSpec":
        """Spec of a rectangular sub-grid starting at (row0, col0)."""
        if row0 < 0 or col0 < 0 or row0 + nrows > self.nlat or col0 + ncols > self.nlon:
            raise ValidationError("window exceeds grid bounds")
        return GridSpec(
            lat0=self.lat0 + row0 * self.dlat,
            lon0=self.lon0 + col0 * self.dlon,
            dlat=self.dlat,
            dlon=self.dlon,
            nlat=nrows,
            nlon=ncols,
        )


@dataclass
class GridField:
    """An array on a regular lat/lon grid with named dims and a unit tag.

    The trailing two dims are always (lat, lon); leading dims (time, level)
    are allowed. ``unit_tag`` says where the values sit in the unit chain
    and only changes through the declared transforms.
    """

    values: np.ndarray
    dims: tuple
    lat0: float
    lon0: float
    dlat: float
    dlon: float
    unit_tag: str = "raw"
    name: str = ""
    timestamp: datetime | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.dims = tuple(self.dims)
        if self.values.ndim != len(self.dims):
            raise ValidationError(
                f"values have {self.values.ndim} dims but {len(self.dims)} names given"
            )
        if self.values.ndim < 2 or self.dims[-2:] != ("lat", "lon"):
            raise ValidationError("trailing dims must be ('lat', 'lon')")
        if self.dlat <= 0 or self.dlon <= 0:
            raise ValidationError("grid spacing must be positive")
        if self.unit_tag not in UNIT_TAGS:
            raise ValidationError(f"unknown unit tag {self.unit_tag!r}")

    @property
    def nlat(self) -> int:
        return self.values.shape[-2]

    @property
    def nlon(self) -> int:
        return self.values.shape[-1]

    @property
    def spec(self) -> GridSpec:
        return GridSpec(self.lat0, self.lon0, self.dlat, self.dlon, self.nlat, self.nlon)

    @property
    def lats(self) -> np.ndarray:
        return self.spec.lats

    @property
    def lons(self) -> np.ndarray:
        return self.spec.lons

    def _with(self, values, unit_tag=None, **overrides) -> "GridField":
        kw = dict(
            dims=self.dims,
            lat0=self.lat0,
            lon0=self.lon0,
            dlat=self.dlat,
            dlon=self.dlon,
            unit_tag=self.unit_tag if unit_tag is None else unit_tag,
            name=self.name,
            timestamp=self.timestamp,
        )
        kw.update(overrides)
        return GridField(values=values, **kw)


@dataclass
class AtmosphericState:
    """One timestep of the coarse atmospheric state.

    surface: (S, H, W) with variable names in ``surface_vars``
    upper:   (V, L, H, W) on ``levels`` (hPa), names in ``upper_vars``
    features: optional static/temporal channel stack (F, H, W)
    """

    surface: np.ndarray
    surface_vars: tuple
    upper: np.ndarray
    upper_vars: tuple
    levels: tuple
    lat0: float
    lon0: float
    dlat: float
    dlon: float
    timestamp: datetime
    features: np.ndarray | None = None

    def __post_init__(self):
        self.surface = np.asarray(self.surface)
        self.upper = np.asarray(self.upper)
        self.surface_vars = tuple(self.surface_vars)
        self.upper_vars = tuple(self.upper_vars)
        self.levels = tuple(self.levels)
        if self.surface.ndim != 3 or self.surface.shape[0] != len(self.surface_vars):
            raise ValidationError("surface stack must be (n_vars, H, W)")
        if self.upper.ndim != 4 or self.upper.shape[0] != len(self.upper_vars):
            raise ValidationError("upper stack must be (n_vars, L, H, W)")
        if self.upper.shape[1] != len(self.levels):
            raise ValidationError("upper level count does not match levels")
        if self.upper.shape[-2:] != self.surface.shape[-2:]:
            raise ValidationError("surface and upper extents differ")
        if self.features is not None:
            self.features = np.asarray(self.features)
            if self.features.ndim != 3 or self.features.shape[-2:] != self.surface.shape[-2:]:
                raise ValidationError("feature stack extent does not match state")

    @property
    def spec(self) -> GridSpec:
        h, w = self.surface.shape[-2:]
        return GridSpec(self.lat0, self.lon0, self.dlat, self.dlon, h, w)

    def surface_var(self, name: str) -> np.ndarray:
        try:
            return self.surface[self.surface_vars.index(name)]
        except ValueError:
            raise ValidationError(f"no surface variable {name!r}") from None

    def upper_var(self, name: str) -> np.ndarray:
        try:
            return self.upper[self.upper_vars.index(name)]
        except ValueError:
            raise ValidationError(f"no upper variable {name!r}") from None


@dataclass
class NormalizationStats:
    """Per-variable standardization moments plus the dBZ scale per dataset.

    ``dbz_scales`` carries one entry per precipitation dataset ("coarse" for
    the driving analysis, "fine" for the high-resolution target) because the
    two have different climatological maxima.
    """

    means: dict
    stds: dict
    dbz_scales: dict

    def __post_init__(self):
        for k, v in self.stds.items():
            if not v > 0:
                raise ValidationError(f"std for {k!r} must be positive")
        for k, v in self.dbz_scales.items():
            if not v > 0:
                raise ValidationError(f"dbz scale for {k!r} must be positive")

    def to_dict(self) -> dict:
        return {
            "means": dict(self.means),
            "stds": dict(self.stds),
            "dbz_scales": dict(self.dbz_scales),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(means=dict(d["means"]), stds=dict(d["stds"]), dbz_scales=dict(d["dbz_scales"]))


@dataclass
class ResidualField:
    """Fine-scale residual: high-res precip minus the regridded coarse mean.

    Values are float64 on the fine grid; ``bounds`` records the region as
    (lat_min, lat_max, lon_min, lon_max) of covered cell centers.
    """

    values: np.ndarray
    lat0: float
    lon0: float
    dlat: float
    dlon: float
    bounds: tuple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValidationError("residual field must be 2-D (lat, lon)")
        if self.dlat <= 0 or self.dlon <= 0:
            raise ValidationError("grid spacing must be positive")

    @property
    def spec(self) -> GridSpec:
        h, w = self.values.shape
        return GridSpec(self.lat0, self.lon0, self.dlat, self.dlon, h, w)


# ---------------------------------------------------------------------------
# unit transforms


def _require_unit(f: GridField, unit: str, op: str):
    if f.unit_tag != unit:
        raise ValidationError(f"{op} expects unit {unit!r}, got {f.unit_tag!r}")


def to_dbz(f: GridField) -> GridField:
    """Map rain amounts (mm) to reflectivity via dBZ = 10 log10(200 TP^1.6).

    Cells below ``TP_FLOOR_MM`` are floored to ``DBZ_FLOOR``. Negative rain
    is rejected. Output dtype follows the input dtype.
    """
    _require_unit(f, "mm", "to_dbz")
    v = f.values
    if np.any(v < 0):
        raise ValidationError("negative precipitation is not a valid amount")
    out = np.full_like(v, DBZ_FLOOR)
    wet = v >= TP_FLOOR_MM
    vw = v[wet]
    out[wet] = 10.0 * np.log10(200.0 * vw ** np.asarray(1.6, dtype=v.dtype))
    return f._with(out, unit_tag="dbz")


def from_dbz(f: GridField) -> GridField:
    """Invert ``to_dbz``: TP = (10^(dBZ/10) / 200)^(1/1.6), floor maps to 0 mm."""
    _require_unit(f, "dbz", "from_dbz")
    v = f.values
    out = np.zeros_like(v)
    hot = v > DBZ_FLOOR
    vh = v[hot]
    one_six = np.asarray(1.6, dtype=v.dtype)
    out[hot] = (10.0 ** (vh / 10.0) / 200.0) ** (1.0 / one_six)
    return f._with(out, unit_tag="mm")


def compute_dbz_scale(series) -> float:
    """Scale for dBZ normalization: the mean over time of each field's max."""
    fields = list(series)
    if not fields:
        raise ValidationError("cannot compute a scale from an empty series")
    ref = fields[0]
    maxima = []
    for f in fields:
        _require_unit(f, "dbz", "compute_dbz_scale")
        if f.values.shape != ref.values.shape or f.spec != ref.spec:
            raise ValidationError("scale series must share one grid")
        maxima.append(np.max(f.values))
    return float(np.mean(np.asarray(maxima, dtype=np.float64)))


def normalize_dbz(f: GridField, scale: float) -> GridField:
    """Divide reflectivity by the dataset scale. Values are not clamped."""
    _require_unit(f, "dbz", "normalize_dbz")
    if not scale > 0:
        raise ValidationError("dbz scale must be positive")
    return f._with(f.values / np.asarray(scale, dtype=f.values.dtype), unit_tag="norm")


def denormalize_dbz(f: GridField, scale: float) -> GridField:
    """Invert ``normalize_dbz``."""
    _require_unit(f, "norm", "denormalize_dbz")
    if not scale > 0:
        raise ValidationError("dbz scale must be positive")
    return f._with(f.values * np.asarray(scale, dtype=f.values.dtype), unit_tag="dbz")


def standardize(f: GridField, stats: NormalizationStats, var: str | None = None) -> GridField:
    """Per-variable z-score using the recorded mean and std."""
    name = var or f.name
    if name not in stats.means or name not in stats.stds:
        raise ConfigurationError(f"no standardization stats for variable {name!r}")
    m = stats.means[name]
    s = stats.stds[name]
    v = f.values
    return f._with((v - np.asarray(m, dtype=v.dtype)) / np.asarray(s, dtype=v.dtype))


def unstandardize(f: GridField, stats: NormalizationStats, var: str | None = None) -> GridField:
    """Invert ``standardize``."""
    name = var or f.name
    if name not in stats.means or name not in stats.stds:
        raise ConfigurationError(f"no standardization stats for variable {name!r}")
    m = stats.means[name]
    s = stats.stds[name]
    v = f.values
    return f._with(v * np.asarray(s, dtype=v.dtype) + np.asarray(m, dtype=v.dtype))


def standardize_array(values: np.ndarray, mean: float, std: float) -> np.ndarray:
    """Array-level z-score for state stacks that are not GridFields."""
    if not std > 0:
        raise ConfigurationError("standardization std must be positive")
    v = np.asarray(values)
    return (v - np.asarray(mean, dtype=v.dtype)) / np.asarray(std, dtype=v.dtype)


# ---------------------------------------------------------------------------
# spatial operators


def avgpool_downsample(f: GridField, k: int) -> GridField:
    """Non-overlapping k x k block means over the trailing (lat, lon) dims.

    Trailing rows/columns that do not fill a block are cropped. Spacing is
    multiplied by k and the origin moves to the center of the first block.
    """
    if int(k) != k or k < 1:
        raise ValidationError("pooling factor must be a positive integer")
    k = int(k)
    v = f.values
    h, w = v.shape[-2:]
    if h < k or w < k:
        raise ValidationError("pooling factor exceeds field extent")
    hk, wk = h // k, w // k
    v = v[..., : hk * k, : wk * k]
    lead = v.shape[:-2]
    v = v.reshape(lead + (hk, k, wk, k)).mean(axis=(-3, -1))
    return f._with(
        v,
        lat0=f.lat0 + f.dlat * (k - 1) / 2,
        lon0=f.lon0 + f.dlon * (k - 1) / 2,
        dlat=f.dlat * k,
        dlon=f.dlon * k,
    )


def _nearest_indices(src0: float, dsrc: float, nsrc: int, centers: np.ndarray) -> np.ndarray:
    # ties at the half-cell boundary go to the lower index
    frac = (centers - src0) / dsrc
    idx = np.ceil(frac - 0.5).astype(np.int64)
    if np.any(idx < 0) or np.any(idx >= nsrc):
        raise ValidationError("target grid extends outside the source grid")
    return idx


def nearest_regrid(f: GridField, target: GridSpec) -> GridField:
    """Sample a field onto ``target`` by nearest source cell center.

    For a target produced by ``GridSpec.refine(r)`` this replicates every
    source cell into an r x r block exactly.
    """
    rows = _nearest_indices(f.lat0, f.dlat, f.nlat, target.lats)
    cols = _nearest_indices(f.lon0, f.dlon, f.nlon, target.lons)
    v = np.take(np.take(f.values, rows, axis=-2), cols, axis=-1)
    return f._with(
        v, lat0=target.lat0, lon0=target.lon0, dlat=target.dlat, dlon=target.dlon
    )


def crop_region(f: GridField, bounds) -> GridField:
    """Select cells whose centers fall inside (lat_min, lat_max, lon_min, lon_max)."""
    lat_min, lat_max, lon_min, lon_max = bounds
    if lat_min > lat_max or lon_min > lon_max:
        raise ValidationError("region bounds are inverted")
    tol_lat = 1e-9 * f.dlat
    tol_lon = 1e-9 * f.dlon
    lats = f.lats
    lons = f.lons
    if lat_min < lats[0] - tol_lat or lat_max > lats[-1] + tol_lat:
        raise ValidationError("latitude bounds outside the grid")
    if lon_min < lons[0] - tol_lon or lon_max > lons[-1] + tol_lon:
        raise ValidationError("longitude bounds outside the grid")
    rsel = np.nonzero((lats >= lat_min - tol_lat) & (lats <= lat_max + tol_lat))[0]
    csel = np.nonzero((lons >= lon_min - tol_lon) & (lons <= lon_max + tol_lon))[0]
    if rsel.size == 0 or csel.size == 0:
        raise ValidationError("region contains no grid cells")
    v = f.values[..., rsel[0] : rsel[-1] + 1, csel[0] : csel[-1] + 1]
    return f._with(v, lat0=float(lats[rsel[0]]), lon0=float(lons[csel[0]]))


def crop_window(f: GridField, row0: int, col0: int, nrows: int, ncols: int) -> GridField:
    """Index-based crop; exact companion of ``GridSpec.window``."""
    if row0 < 0 or col0 < 0 or row0 + nrows > f.nlat or col0 + ncols > f.nlon:
        raise ValidationError("window exceeds grid bounds")
    v = f.values[..., row0 : row0 + nrows, col0 : col0 + ncols]
    return f._with(v, lat0=f.lat0 + row0 * f.dlat, lon0=f.lon0 + col0 * f.dlon)


def decompose_residual(fine_norm: GridField, coarse_norm: GridField) -> ResidualField:
    """Split the fine field into (regridded coarse mean) + residual.

    Both inputs must be normalized reflectivity. The subtraction is done in
    float64; for float32 inputs in the normalized range that difference is
    exact, so ``residual + regridded coarse == fine`` holds bit for bit.
    """
    _require_unit(fine_norm, "norm", "decompose_residual")
    _require_unit(coarse_norm, "norm", "decompose_residual")
    if fine_norm.values.ndim != 2 or coarse_norm.values.ndim != 2:
        raise ValidationError("decompose_residual expects single 2-D fields")
    mean_on_fine = nearest_regrid(coarse_norm, fine_norm.spec)
    residual = fine_norm.values.astype(np.float64) - mean_on_fine.values.astype(np.float64)
    lats = fine_norm.lats
    lons = fine_norm.lons
    return ResidualField(
        values=residual,
        lat0=fine_norm.lat0,
        lon0=fine_norm.lon0,
        dlat=fine_norm.dlat,
        dlon=fine_norm.dlon,
        bounds=(float(lats[0]), float(lats[-1]), float(lons[0]), float(lons[-1])),
    )
