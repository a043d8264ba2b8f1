"""Unit-chain and spatial-operator tests.

Derived expectations are frozen from independent oracles: scipy.brentq for
the zero-dBZ crossing, explicit loops for block averages and regridding.
"""
import numpy as np
import pytest

from raincast.errors import ConfigurationError, ValidationError
from raincast.grid import (
    GridField,
    GridSpec,
    NormalizationStats,
    avgpool_downsample,
    compute_dbz_scale,
    crop_region,
    crop_window,
    decompose_residual,
    denormalize_dbz,
    from_dbz,
    nearest_regrid,
    normalize_dbz,
    standardize,
    to_dbz,
    unstandardize,
)

# frozen oracle constants
DBZ_1MM = 23.010299956639813          # 10*log10(200)
DBZ_10MM = 39.010299956639813         # 10*log10(200*10**1.6)
TP_ZERO_DBZ = 0.03646332368608555     # brentq root of 200*x**1.6 == 1


def mk(values, unit="mm", **kw):
    v = np.asarray(values)
    args = dict(dims=("lat", "lon"), lat0=0.0, lon0=0.0, dlat=1.0, dlon=1.0, unit_tag=unit)
    args.update(kw)
    return GridField(values=v, **args)


class TestGridField:
    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            mk(np.zeros((3, 4, 5)))

    def test_nonpositive_spacing_rejected(self):
        with pytest.raises(ValidationError):
            mk(np.zeros((3, 4)), dlat=0.0)

    def test_unknown_unit_rejected(self):
        with pytest.raises(ValidationError):
            mk(np.zeros((3, 4)), unit="inches")

    def test_axis_coordinates(self):
        f = mk(np.zeros((3, 4)), lat0=10.0, lon0=100.0, dlat=0.5, dlon=0.25)
        assert np.allclose(f.lats, [10.0, 10.5, 11.0])
        assert np.allclose(f.lons, [100.0, 100.25, 100.5, 100.75])


class TestDbzTransforms:
    def test_one_millimetre(self):
        f = to_dbz(mk(np.full((2, 2), 1.0)))
        assert f.unit_tag == "dbz"
        assert np.allclose(f.values, DBZ_1MM, rtol=0, atol=1e-12)

    def test_zero_rain_hits_floor(self):
        f = to_dbz(mk(np.zeros((2, 2))))
        assert np.all(f.values == 0.0)

    def test_subthreshold_rain_hits_floor(self):
        f = to_dbz(mk(np.full((2, 2), 0.009)))
        assert np.all(f.values == 0.0)

    def test_zero_dbz_crossing(self):
        f = to_dbz(mk(np.full((1, 1), TP_ZERO_DBZ)))
        assert abs(f.values[0, 0]) < 1e-9

    def test_negative_rain_rejected(self):
        with pytest.raises(ValidationError):
            to_dbz(mk(np.array([[-0.1, 1.0]])))

    def test_wrong_unit_rejected(self):
        with pytest.raises(ValidationError):
            to_dbz(mk(np.ones((2, 2)), unit="dbz"))
        with pytest.raises(ValidationError):
            from_dbz(mk(np.ones((2, 2)), unit="mm"))

    def test_inverse_of_one_millimetre(self):
        f = from_dbz(mk(np.full((2, 2), DBZ_1MM), unit="dbz"))
        assert f.unit_tag == "mm"
        assert np.allclose(f.values, 1.0, rtol=1e-12)

    def test_inverse_of_ten_millimetres(self):
        f = from_dbz(mk(np.full((1, 1), DBZ_10MM), unit="dbz"))
        assert np.allclose(f.values, 10.0, rtol=1e-12)

    def test_floor_maps_to_zero_millimetres(self):
        f = from_dbz(mk(np.array([[0.0, -3.0]]), unit="dbz"))
        assert np.all(f.values == 0.0)

    def test_round_trip_above_drizzle(self):
        rng = np.random.default_rng(11)
        tp = mk(rng.uniform(0.05, 200.0, size=(64, 64)))
        back = from_dbz(to_dbz(tp))
        rel = np.abs(back.values - tp.values) / tp.values
        assert rel.max() < 1e-9

    def test_dtype_follows_input(self):
        f32 = to_dbz(mk(np.ones((2, 2), dtype=np.float32)))
        assert f32.values.dtype == np.float32
        f64 = to_dbz(mk(np.ones((2, 2), dtype=np.float64)))
        assert f64.values.dtype == np.float64


class TestDbzScale:
    def test_mean_of_maxima(self):
        a = mk(np.array([[1.0, 30.0]]), unit="dbz")
        b = mk(np.array([[50.0, 2.0]]), unit="dbz")
        assert compute_dbz_scale([a, b]) == 40.0

    def test_constant_series(self):
        fields = [mk(np.full((3, 3), 7.5), unit="dbz") for _ in range(5)]
        assert compute_dbz_scale(fields) == 7.5

    def test_matches_bruteforce_exactly(self):
        rng = np.random.default_rng(3)
        fields = [mk(rng.uniform(0, 60, size=(9, 11)), unit="dbz") for _ in range(17)]
        maxima = []
        for f in fields:
            m = -np.inf
            for i in range(9):
                for j in range(11):
                    m = max(m, f.values[i, j])
            maxima.append(m)
        brute = float(np.mean(np.asarray(maxima)))
        assert compute_dbz_scale(fields) == brute

    def test_empty_series_rejected(self):
        with pytest.raises(ValidationError):
            compute_dbz_scale([])

    def test_mismatched_grids_rejected(self):
        a = mk(np.zeros((2, 2)), unit="dbz")
        b = mk(np.zeros((3, 3)), unit="dbz")
        with pytest.raises(ValidationError):
            compute_dbz_scale([a, b])


class TestNormalization:
    def test_divide_by_scale(self):
        f = normalize_dbz(mk(np.array([[10.0, 55.0]]), unit="dbz"), 50.0)
        assert f.unit_tag == "norm"
        assert np.allclose(f.values, [[0.2, 1.1]])

    def test_values_above_one_survive(self):
        f = normalize_dbz(mk(np.array([[60.0]]), unit="dbz"), 40.0)
        assert f.values[0, 0] == pytest.approx(1.5)

    def test_round_trip(self):
        rng = np.random.default_rng(5)
        z = mk(rng.uniform(0, 60, size=(8, 8)), unit="dbz")
        back = denormalize_dbz(normalize_dbz(z, 41.7), 41.7)
        assert np.allclose(back.values, z.values, rtol=1e-12)
        assert back.unit_tag == "dbz"

    def test_nonpositive_scale_rejected(self):
        z = mk(np.ones((2, 2)), unit="dbz")
        with pytest.raises(ValidationError):
            normalize_dbz(z, 0.0)
        with pytest.raises(ValidationError):
            denormalize_dbz(normalize_dbz(z, 1.0), -2.0)


class TestStandardize:
    def stats(self):
        return NormalizationStats(
            means={"t2m": 288.0}, stds={"t2m": 10.0}, dbz_scales={"coarse": 40.0}
        )

    def test_zscore(self):
        f = mk(np.array([[288.0, 298.0]]), unit="raw", name="t2m")
        out = standardize(f, self.stats())
        assert np.allclose(out.values, [[0.0, 1.0]])

    def test_round_trip_identity(self):
        rng = np.random.default_rng(7)
        f = mk(rng.normal(288, 12, size=(6, 6)), unit="raw", name="t2m")
        back = unstandardize(standardize(f, self.stats()), self.stats())
        assert np.allclose(back.values, f.values, rtol=0, atol=1e-12)

    def test_missing_variable_rejected(self):
        f = mk(np.ones((2, 2)), unit="raw", name="mslp")
        with pytest.raises(ConfigurationError):
            standardize(f, self.stats())

    def test_zero_std_rejected(self):
        with pytest.raises(ValidationError):
            NormalizationStats(means={"x": 0.0}, stds={"x": 0.0}, dbz_scales={"c": 1.0})


class TestAvgpool:
    def test_two_by_two(self):
        f = avgpool_downsample(mk(np.array([[1.0, 2.0], [3.0, 4.0]])), 2)
        assert f.values.shape == (1, 1)
        assert f.values[0, 0] == 2.5

    def test_constant_field(self):
        f = avgpool_downsample(mk(np.full((8, 8), 3.25)), 4)
        assert np.all(f.values == 3.25)

    def test_ramp_against_bruteforce(self):
        v = np.arange(100, dtype=np.float64).reshape(10, 10)
        got = avgpool_downsample(mk(v), 5).values
        # frozen from the explicit-loop oracle
        assert np.array_equal(got, np.array([[22.0, 27.0], [72.0, 77.0]]))

    def test_trailing_cells_cropped(self):
        v = np.arange(35, dtype=np.float64).reshape(5, 7)
        got = avgpool_downsample(mk(v), 2)
        assert got.values.shape == (2, 3)
        assert got.values[0, 0] == np.mean(v[0:2, 0:2])

    def test_mean_preserved_over_pooled_extent(self):
        rng = np.random.default_rng(13)
        v = rng.uniform(0, 50, size=(40, 60))
        got = avgpool_downsample(mk(v), 5)
        rel = abs(got.values.mean() - v.mean()) / v.mean()
        assert rel < 1e-10

    def test_spacing_scaled(self):
        f = avgpool_downsample(mk(np.zeros((10, 10)), dlat=0.01, dlon=0.01), 5)
        assert f.dlat == pytest.approx(0.05)
        assert f.dlon == pytest.approx(0.05)

    def test_bad_factor_rejected(self):
        with pytest.raises(ValidationError):
            avgpool_downsample(mk(np.zeros((4, 4))), 0)

    def test_leading_dims_pooled_independently(self):
        rng = np.random.default_rng(17)
        v = rng.normal(size=(3, 8, 8))
        f = GridField(values=v, dims=("time", "lat", "lon"), lat0=0, lon0=0, dlat=1, dlon=1)
        got = avgpool_downsample(f, 2)
        assert got.values.shape == (3, 4, 4)
        assert got.values[1, 0, 0] == pytest.approx(v[1, 0:2, 0:2].mean())


class TestNearestRegrid:
    def test_integer_factor_replicates(self):
        src = mk(np.array([[1.0, 2.0], [3.0, 4.0]]))
        out = nearest_regrid(src, src.spec.refine(5))
        # oracle: Kronecker replication
        assert np.array_equal(out.values, np.repeat(np.repeat(src.values, 5, 0), 5, 1))

    def test_every_block_constant(self):
        rng = np.random.default_rng(23)
        src = mk(rng.normal(size=(6, 7)))
        r = 3
        out = nearest_regrid(src, src.spec.refine(r)).values
        for i in range(6):
            for j in range(7):
                block = out[i * r : (i + 1) * r, j * r : (j + 1) * r]
                assert np.all(block == src.values[i, j])

    def test_identity_grid(self):
        src = mk(np.arange(12, dtype=np.float64).reshape(3, 4))
        out = nearest_regrid(src, src.spec)
        assert np.array_equal(out.values, src.values)

    def test_tie_goes_to_lower_index(self):
        # target center exactly halfway between source centers 0.0 and 1.0
        src = mk(np.array([[10.0, 20.0]]))
        tgt = GridSpec(lat0=0.0, lon0=0.5, dlat=1.0, dlon=1.0, nlat=1, nlon=1)
        out = nearest_regrid(src, tgt)
        assert out.values[0, 0] == 10.0

    def test_outside_source_rejected(self):
        src = mk(np.zeros((3, 3)))
        tgt = GridSpec(lat0=-5.0, lon0=0.0, dlat=1.0, dlon=1.0, nlat=2, nlon=2)
        with pytest.raises(ValidationError):
            nearest_regrid(src, tgt)


class TestCrop:
    def test_quarter_degree_subtropics(self):
        # 0..60 N at 0.25 degrees cropped to 15..60 N keeps 181 rows
        f = mk(np.zeros((241, 281)), lat0=0.0, lon0=70.0, dlat=0.25, dlon=0.25)
        out = crop_region(f, (15.0, 60.0, 70.0, 140.0))
        assert out.values.shape == (181, 281)
        assert out.lat0 == pytest.approx(15.0)

    def test_idempotent(self):
        f = mk(np.arange(100, dtype=np.float64).reshape(10, 10), lat0=20.0, lon0=100.0)
        once = crop_region(f, (22.0, 27.0, 103.0, 106.0))
        twice = crop_region(once, (22.0, 27.0, 103.0, 106.0))
        assert np.array_equal(once.values, twice.values)
        assert once.lat0 == twice.lat0 and once.lon0 == twice.lon0

    def test_bounds_outside_rejected(self):
        f = mk(np.zeros((5, 5)), lat0=10.0, lon0=10.0)
        with pytest.raises(ValidationError):
            crop_region(f, (0.0, 12.0, 10.0, 12.0))

    def test_window_matches_region(self):
        f = mk(np.arange(56, dtype=np.float64).reshape(7, 8), lat0=5.0, lon0=50.0)
        a = crop_window(f, 2, 3, 4, 5)
        b = crop_region(f, (7.0, 10.0, 53.0, 57.0))
        assert np.array_equal(a.values, b.values)
        assert a.lat0 == b.lat0 and a.lon0 == b.lon0

    def test_window_out_of_bounds_rejected(self):
        f = mk(np.zeros((5, 5)))
        with pytest.raises(ValidationError):
            crop_window(f, 3, 0, 4, 2)


class TestResidualDecomposition:
    def build_pair(self, seed=0):
        rng = np.random.default_rng(seed)
        coarse = mk(
            rng.uniform(0, 1.2, size=(4, 6)).astype(np.float32),
            unit="norm",
            lat0=10.0,
            lon0=100.0,
        )
        fine_spec = coarse.spec.refine(5)
        fine = GridField(
            values=rng.uniform(0, 1.2, size=(20, 30)).astype(np.float32),
            dims=("lat", "lon"),
            lat0=fine_spec.lat0,
            lon0=fine_spec.lon0,
            dlat=fine_spec.dlat,
            dlon=fine_spec.dlon,
            unit_tag="norm",
        )
        return fine, coarse

    def test_identical_inputs_give_zero(self):
        fine, coarse = self.build_pair(1)
        regridded = nearest_regrid(coarse, fine.spec)
        same = fine._with(regridded.values)
        res = decompose_residual(same, coarse)
        assert np.all(res.values == 0.0)

    def test_zero_mean_gives_fine_field(self):
        fine, coarse = self.build_pair(2)
        zero = coarse._with(np.zeros_like(coarse.values))
        res = decompose_residual(fine, zero)
        assert np.array_equal(res.values, fine.values.astype(np.float64))

    def test_addback_is_exact(self):
        for seed in range(5):
            fine, coarse = self.build_pair(seed)
            res = decompose_residual(fine, coarse)
            regridded = nearest_regrid(coarse, fine.spec)
            recon = res.values + regridded.values.astype(np.float64)
            # zero-ulp check: float64 exact
            assert np.array_equal(recon, fine.values.astype(np.float64))

    def test_unit_enforced(self):
        fine, coarse = self.build_pair(3)
        with pytest.raises(ValidationError):
            decompose_residual(fine._with(fine.values, unit_tag="mm"), coarse)

    def test_bounds_recorded(self):
        fine, coarse = self.build_pair(4)
        res = decompose_residual(fine, coarse)
        assert res.bounds[0] == pytest.approx(fine.lats[0])
        assert res.bounds[3] == pytest.approx(fine.lons[-1])
