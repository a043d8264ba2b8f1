"""Recombination, member generation, and probability matching."""
import numpy as np
import pytest
import torch

from raincast.diffusion import make_schedule
from raincast.ensemble import (
    EnsembleSet,
    _pm_values,
    generate_members,
    parent_window,
    probability_match,
    recombine,
)
from raincast.errors import ValidationError
from raincast.grid import (
    GridField,
    GridSpec,
    NormalizationStats,
    crop_region,
    decompose_residual,
    denormalize_dbz,
    from_dbz,
    nearest_regrid,
    normalize_dbz,
    to_dbz,
)
from raincast.models.dit import build_dit
from raincast.models.vae import ResidualVAE
from raincast.profiles import DESK, Profile

STATS = NormalizationStats(means={}, stds={}, dbz_scales={"coarse": 37.5, "fine": 42.0})


def gf(values, spec, unit="mm", name="tp"):
    return GridField(
        values=values,
        dims=("lat", "lon"),
        lat0=spec.lat0,
        lon0=spec.lon0,
        dlat=spec.dlat,
        dlon=spec.dlon,
        unit_tag=unit,
        name=name,
    )


def rain_field(rng, spec, scale=4.0):
    """Rain with dry cells; everything wet sits above the drizzle floor."""
    v = rng.gamma(0.5, scale, size=(spec.nlat, spec.nlon))
    v[v < 0.05] = 0.0
    return v


def residual_window(coarse_norm, fine_spec, refinement):
    win = parent_window(fine_spec, refinement)
    lats, lons = win.lats, win.lons
    return crop_region(coarse_norm, (lats[0], lats[-1], lons[0], lons[-1]))


# ---------------------------------------------------------------------------
# parent window


def test_parent_window_inverts_refine():
    assert parent_window(DESK.fine, DESK.refinement) == DESK.residual_coarse
    spec = GridSpec(lat0=-3.0, lon0=11.5, dlat=0.5, dlon=0.25, nlat=6, nlon=8)
    for r in (1, 2, 3):
        assert parent_window(spec.refine(r), r) == spec


def test_parent_window_rejects_bad_factor():
    with pytest.raises(ValidationError):
        parent_window(DESK.fine, 3)  # 100 x 140 does not divide by 3 in lon
    with pytest.raises(ValidationError):
        parent_window(DESK.fine, 0)


# ---------------------------------------------------------------------------
# recombine


def test_recombine_zero_residual_is_regridded_mean():
    rng = np.random.default_rng(11)
    fine = DESK.fine
    coarse_norm = normalize_dbz(
        to_dbz(gf(rain_field(rng, DESK.coarse), DESK.coarse)), STATS.dbz_scales["coarse"]
    )
    window = residual_window(coarse_norm, fine, DESK.refinement)
    zero = decompose_residual(
        gf(np.zeros((fine.nlat, fine.nlon)), fine, unit="norm"),
        gf(np.zeros((window.nlat, window.nlon)), window.spec, unit="norm"),
    )
    out = recombine(coarse_norm, zero, STATS, DESK.refinement)

    regrid = nearest_regrid(window, fine)
    manual = from_dbz(
        denormalize_dbz(
            gf(regrid.values.astype(np.float64), fine, unit="norm"), STATS.dbz_scales["fine"]
        )
    )
    assert out.unit_tag == "mm"
    assert np.array_equal(out.values, manual.values)


def test_recombine_reconstructs_fine_field():
    rng = np.random.default_rng(5)
    fine = DESK.fine
    tp_fine = rain_field(rng, fine, scale=5.0)
    coarse_norm = normalize_dbz(
        to_dbz(gf(rain_field(rng, DESK.coarse), DESK.coarse)), STATS.dbz_scales["coarse"]
    )
    fine_norm = normalize_dbz(to_dbz(gf(tp_fine, fine)), STATS.dbz_scales["fine"])
    window = residual_window(coarse_norm, fine, DESK.refinement)
    residual = decompose_residual(fine_norm, window)

    rec = recombine(coarse_norm, residual, STATS, DESK.refinement)
    wet = tp_fine > 0
    rel = np.abs(rec.values[wet] - tp_fine[wet]) / tp_fine[wet]
    assert rel.max() < 1e-9
    assert np.all(rec.values[~wet] == 0.0)


def test_recombine_outputs_nonnegative():
    rng = np.random.default_rng(3)
    fine = DESK.fine
    coarse_norm = normalize_dbz(
        to_dbz(gf(rain_field(rng, DESK.coarse), DESK.coarse)), STATS.dbz_scales["coarse"]
    )
    window = residual_window(coarse_norm, fine, DESK.refinement)
    zero = decompose_residual(
        gf(np.zeros((fine.nlat, fine.nlon)), fine, unit="norm"),
        gf(np.zeros((window.nlat, window.nlon)), window.spec, unit="norm"),
    )
    noisy = type(zero)(
        values=rng.normal(0.0, 0.5, size=zero.values.shape),
        lat0=zero.lat0,
        lon0=zero.lon0,
        dlat=zero.dlat,
        dlon=zero.dlon,
        bounds=zero.bounds,
    )
    out = recombine(coarse_norm, noisy, STATS, DESK.refinement)
    assert np.all(out.values >= 0.0)
    assert np.all(np.isfinite(out.values))


def test_recombine_rejects_bad_inputs():
    rng = np.random.default_rng(1)
    fine = DESK.fine
    coarse_norm = normalize_dbz(
        to_dbz(gf(rain_field(rng, DESK.coarse), DESK.coarse)), STATS.dbz_scales["coarse"]
    )
    window = residual_window(coarse_norm, fine, DESK.refinement)
    zero = decompose_residual(
        gf(np.zeros((fine.nlat, fine.nlon)), fine, unit="norm"),
        gf(np.zeros((window.nlat, window.nlon)), window.spec, unit="norm"),
    )
    mm_mean = gf(rain_field(rng, DESK.coarse), DESK.coarse)
    with pytest.raises(ValidationError):
        recombine(mm_mean, zero, STATS, DESK.refinement)

    disjoint = GridSpec(lat0=80.0, lon0=10.0, dlat=1.0, dlon=1.0, nlat=25, nlon=35)
    far = gf(coarse_norm.values, disjoint, unit="norm")
    with pytest.raises(ValidationError):
        recombine(far, zero, STATS, DESK.refinement)


# ---------------------------------------------------------------------------
# probability matching


def test_pm_two_member_two_cell_case():
    stack = np.array([[1.0, 3.0], [2.0, 4.0]])
    assert np.array_equal(_pm_values(stack), np.array([2.0, 4.0]))


def test_pm_identical_members_bitwise():
    rng = np.random.default_rng(9)
    base = np.round(rng.gamma(0.6, 4.0, size=(20, 28)), 1).astype(np.float32)
    assert (base == np.round(base, 1)).all() and (np.unique(base).size < base.size)
    out = _pm_values(np.stack([base] * 5))
    assert out.dtype == base.dtype
    assert np.array_equal(out, base)


def test_pm_preserves_mean_rank_order():
    rng = np.random.default_rng(21)
    stack = rng.gamma(0.7, 3.0, size=(7, 15, 11))
    out = _pm_values(stack).ravel()
    mean = stack.mean(axis=0).ravel()
    order = np.argsort(-mean, kind="stable")
    ordered = out[order]
    assert np.all(np.diff(ordered) <= 0.0)


def test_pm_values_are_every_nth_pooled():
    rng = np.random.default_rng(4)
    stack = rng.gamma(0.7, 3.0, size=(5, 9, 13))
    out = _pm_values(stack)
    pooled = np.sort(stack.reshape(5, -1).ravel())[::-1]
    assert np.array_equal(np.sort(out.ravel()), np.sort(pooled[::5]))


def test_pm_requires_two_members():
    with pytest.raises(ValidationError):
        _pm_values(np.zeros((1, 4, 4)))


def test_pm_wraps_ensemble_set():
    rng = np.random.default_rng(2)
    fine = DESK.fine
    members = [
        gf(rng.gamma(0.7, 3.0, size=(fine.nlat, fine.nlon)), fine) for _ in range(3)
    ]
    ens = EnsembleSet(members=members, base_seed=0, member_seeds=[0, 1, 2])
    pm = probability_match(ens)
    assert pm.values.shape == (fine.nlat, fine.nlon)
    assert pm.unit_tag == "mm"
    assert pm.spec == fine
    assert np.array_equal(np.sort(pm.values.ravel()), np.sort(_pm_values(ens.stack()).ravel()))


# ---------------------------------------------------------------------------
# ensemble set


def test_ensemble_set_validation():
    rng = np.random.default_rng(0)
    fine = DESK.fine
    good = gf(rng.gamma(0.7, 3.0, size=(fine.nlat, fine.nlon)), fine)
    with pytest.raises(ValidationError):
        EnsembleSet(members=[], base_seed=0)
    other = gf(good.values[:50, :70], GridSpec(fine.lat0, fine.lon0, fine.dlat, fine.dlon, 50, 70))
    with pytest.raises(ValidationError):
        EnsembleSet(members=[good, other], base_seed=0)
    norm = gf(good.values, fine, unit="norm")
    with pytest.raises(ValidationError):
        EnsembleSet(members=[good, norm], base_seed=0)


def test_ensemble_mean_field():
    rng = np.random.default_rng(12)
    fine = DESK.fine
    members = [
        gf(rng.gamma(0.7, 3.0, size=(fine.nlat, fine.nlon)), fine) for _ in range(4)
    ]
    ens = EnsembleSet(members=members, base_seed=0)
    assert len(ens) == 4
    mean = ens.mean_field()
    assert np.allclose(mean.values, np.mean([m.values for m in members], axis=0))


# ---------------------------------------------------------------------------
# member generation

TINY = Profile(
    name="tiny",
    coarse=GridSpec(lat0=15.0, lon0=100.0, dlat=1.0, dlon=1.0, nlat=25, nlon=35),
    levels=(200.0, 400.0, 500.0, 700.0, 850.0),
    residual_box=(2, 3, 4, 4),
    condition_box=(2, 3, 4, 4),
    refinement=5,
    vae_channels=(8, 12, 16, 16),
    dit_dim=32,
    dit_depth=1,
    dit_heads=2,
    members=3,
    ddim_steps=5,
)


def _tiny_setup():
    torch.manual_seed(0)
    vae = ResidualVAE(channels=TINY.vae_channels)
    dit = build_dit(TINY)
    with torch.no_grad():
        for p in dit.parameters():
            p.add_(0.02 * torch.randn(p.shape))
    schedule = make_schedule(50, "linear")
    cond = torch.randn(1, 30, 4, 4)
    rng = np.random.default_rng(6)
    coarse_norm = normalize_dbz(
        to_dbz(gf(rain_field(rng, TINY.coarse), TINY.coarse)), STATS.dbz_scales["coarse"]
    )
    return vae, dit, schedule, cond, coarse_norm


def test_generate_members_deterministic_and_distinct():
    vae, dit, schedule, cond, coarse_norm = _tiny_setup()
    kw = dict(latent_shift=torch.zeros(16), latent_scale=torch.ones(16))
    ens1 = generate_members(coarse_norm, cond, vae, dit, schedule, STATS, TINY, base_seed=7, **kw)
    ens2 = generate_members(coarse_norm, cond, vae, dit, schedule, STATS, TINY, base_seed=7, **kw)
    ens3 = generate_members(coarse_norm, cond, vae, dit, schedule, STATS, TINY, base_seed=1234, **kw)

    assert len(ens1) == TINY.members
    assert ens1.member_seeds == [7, 8, 9]
    fine = TINY.fine
    for m in ens1.members:
        assert m.values.shape == (fine.nlat, fine.nlon)
        assert m.unit_tag == "mm"
        assert np.all(m.values >= 0.0)
    for a, b in zip(ens1.members, ens2.members):
        assert np.array_equal(a.values, b.values)
    assert any(
        not np.array_equal(a.values, b.values) for a, b in zip(ens1.members, ens3.members)
    )
    n = len(ens1)
    for i in range(n):
        for j in range(i + 1, n):
            assert np.abs(ens1.members[i].values - ens1.members[j].values).max() > 0.0


def test_generate_members_rejects_bad_condition():
    vae, dit, schedule, cond, coarse_norm = _tiny_setup()
    kw = dict(latent_shift=torch.zeros(16), latent_scale=torch.ones(16))
    with pytest.raises(ValidationError):
        generate_members(coarse_norm, cond[0], vae, dit, schedule, STATS, TINY, **kw)
    with pytest.raises(ValidationError):
        generate_members(
            coarse_norm, cond, vae, dit, schedule, STATS, TINY, n_members=0, **kw
        )
