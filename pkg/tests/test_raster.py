import datetime as dt

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from agrosr.errors import (
    DegenerateInputError,
    InvalidArgumentError,
    InvalidSpecError,
    MissingBandError,
    ResolutionMismatchError,
)
from agrosr.raster import (
    BandInfo,
    BandStack,
    MapKind,
    MapSet,
    PixelShift,
    SensorEnsemble,
    apply_shift,
    crop,
    downscale,
    estimate_shift,
    register,
    resample_to_resolution,
    upscale,
)
from oracles import block_mean, gaussian_blobs, ncc_shift


def stack_of(grid, px=1.0, names=None):
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 2:
        grid = grid[None]
    names = names or [f"b{i}" for i in range(grid.shape[0])]
    return BandStack(grid, names, px, "2020-01-01")


# --- BandStack ---------------------------------------------------------------


def test_bandstack_is_immutable():
    s = stack_of(np.zeros((4, 4)))
    with pytest.raises(AttributeError):
        s.pixel_size_m = 2.0
    with pytest.raises(ValueError):
        s.data[0, 0, 0] = 1.0


def test_bandstack_validation():
    with pytest.raises(InvalidArgumentError):
        BandStack(np.zeros((2, 4, 4)), ["a"], 1.0)
    with pytest.raises(InvalidArgumentError):
        BandStack(np.zeros((2, 4, 4)), ["a", "a"], 1.0)
    with pytest.raises(InvalidArgumentError):
        BandStack(np.zeros((4, 4)), ["a"], 0.0)
    with pytest.raises(InvalidArgumentError):
        BandStack(np.full((4, 4), np.inf), ["a"], 1.0)
    with pytest.raises(InvalidArgumentError):
        BandInfo("x", -5.0)


def test_standard_bands_get_metadata():
    s = BandStack(np.zeros((2, 3, 3)), ["nir", "thermal"], 0.025, "2018-06-26")
    assert s.bands[0].center_wavelength_nm == 842.0
    assert s.bands[1].units == "degC"
    assert s.acquisition_date == dt.date(2018, 6, 26)
    with pytest.raises(MissingBandError) as err:
        s.band("red")
    assert "red" in str(err.value)


def test_select_keeps_requested_order():
    s = stack_of(np.arange(3 * 4).reshape(3, 2, 2), names=["a", "b", "c"])
    t = s.select(["c", "a"])
    assert t.band_names == ("c", "a")
    assert np.array_equal(t.band("c"), s.band("c"))


# --- downscale ---------------------------------------------------------------


def test_downscale_constant_grid():
    out = downscale(stack_of(np.full((4, 4), 5.0)), 2)
    assert out.data.shape == (1, 2, 2)
    assert np.all(out.data == 5.0)


def test_downscale_block_mean_example():
    out = downscale(stack_of([[1.0, 2.0], [3.0, 4.0]]), 2)
    assert out.data.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == pytest.approx(2.5)


def test_downscale_base_resolution_factor_eight():
    # 2.5 cm base grid reduced by the largest factor studied gives 20 cm pixels
    out = downscale(stack_of(np.zeros((16, 16)), px=0.025), 8)
    assert out.pixel_size_m == pytest.approx(0.2, rel=1e-12)


def test_downscale_rejects_bad_factor():
    s = stack_of(np.zeros((4, 4)))
    with pytest.raises(InvalidArgumentError):
        downscale(s, 0)
    with pytest.raises(InvalidArgumentError):
        downscale(s, 2.0)
    with pytest.raises(InvalidArgumentError):
        downscale(s, 8)


def test_downscale_ignores_nan_and_keeps_all_nan_blocks():
    g = np.array([[1.0, np.nan, np.nan, np.nan], [3.0, np.nan, np.nan, np.nan]])
    out = downscale(stack_of(g), 2).data[0]
    assert out[0, 0] == pytest.approx(2.0)
    assert np.isnan(out[0, 1])


def test_downscale_drops_trailing_partial_blocks():
    out = downscale(stack_of(np.ones((5, 7))), 2)
    assert out.data.shape == (1, 2, 3)


@given(st.data(), st.sampled_from([2, 4, 8]))
def test_downscale_matches_loop_oracle(data, factor):
    shape = (data.draw(st.integers(1, 8)) * factor, data.draw(st.integers(1, 8)) * factor)
    grid = data.draw(arrays(np.float32, shape, elements=st.floats(0, 1, width=32)))
    out = downscale(stack_of(grid), factor).data[0]
    assert np.array_equal(out, block_mean(grid, factor).astype(np.float32))


# --- upscale -----------------------------------------------------------------


@pytest.mark.parametrize("method", ["nearest", "bilinear", "bicubic"])
def test_upscale_factor_one_is_identity(method):
    s = stack_of(np.random.default_rng(0).random((5, 6)))
    assert upscale(s, 1, method) == s


def test_upscale_nearest_replicates():
    out = upscale(stack_of([[7.0]]), 3, "nearest")
    assert out.data.shape == (1, 3, 3)
    assert np.all(out.data == 7.0)


@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-100, 100, width=32)),
       st.sampled_from([2, 4, 8]))
def test_downscale_undoes_nearest_upscale(grid, factor):
    s = stack_of(grid, px=0.025)
    back = downscale(upscale(s, factor, "nearest"), factor)
    assert np.allclose(back.data, s.data, rtol=1e-6, atol=1e-5)
    assert abs(back.pixel_size_m - s.pixel_size_m) <= 1e-12 * s.pixel_size_m


@pytest.mark.parametrize("method", ["bilinear", "bicubic"])
def test_interpolation_preserves_constants_and_dims(method):
    out = upscale(stack_of(np.full((4, 5), 3.25)), 2, method)
    assert out.data.shape == (1, 8, 10)
    assert np.allclose(out.data, 3.25)


def test_interpolation_poisons_stencil_only():
    g = np.ones((8, 8))
    g[4, 4] = np.nan
    out = upscale(stack_of(g), 2, "bilinear").data[0]
    nan_rows, nan_cols = np.nonzero(np.isnan(out))
    # bilinear stencil: output cells within one source cell of the hole
    assert nan_rows.min() >= 7 and nan_rows.max() <= 10
    assert nan_cols.min() >= 7 and nan_cols.max() <= 10
    assert np.isnan(out[8:10, 8:10]).all()
    assert np.isfinite(out[:6]).all()


def test_upscale_rejects_unknown_method():
    with pytest.raises(InvalidArgumentError):
        upscale(stack_of(np.ones((2, 2))), 2, "lanczos")


# --- resample_to_resolution -------------------------------------------------


def test_resample_base_to_five_cm_downscales_by_two():
    s = stack_of(np.arange(16.0).reshape(4, 4), px=0.025)
    out = resample_to_resolution(s, 0.05)
    assert out.pixel_size_m == pytest.approx(0.05)
    assert out == downscale(s, 2)


def test_resample_same_resolution_is_identity():
    s = stack_of(np.ones((4, 4)), px=0.1)
    assert resample_to_resolution(s, 0.1) == s


def test_resample_non_integer_ratio_lists_alternatives():
    s = stack_of(np.ones((4, 4)), px=0.025)
    with pytest.raises(ResolutionMismatchError) as err:
        resample_to_resolution(s, 0.07)
    assert err.value.code == "resolution-mismatch"
    assert err.value.alternatives == pytest.approx((0.05, 0.075))


def test_resample_upscales_and_guards_blowup():
    s = stack_of(np.ones((4, 4)), px=0.1)
    assert resample_to_resolution(s, 0.05).data.shape == (1, 8, 8)
    with pytest.raises(InvalidArgumentError):
        resample_to_resolution(s, 100.0)


# --- crop ----------------------------------------------------------------------


def test_crop_examples():
    g = np.arange(16.0).reshape(4, 4)
    s = stack_of(g)
    assert crop(s, 0, 0, 4, 4) == s
    assert np.array_equal(crop(s, 1, 1, 2, 2).data[0], g[1:3, 1:3])
    with pytest.raises(InvalidArgumentError):
        crop(s, 1, 1, 0, 2)
    with pytest.raises(InvalidArgumentError):
        crop(s, 3, 3, 2, 2)


# --- registration ------------------------------------------------------------


def test_estimate_shift_identical_grids():
    g = gaussian_blobs(64, 20, seed=1)
    sh = estimate_shift(g, g)
    assert (sh.dx_px, sh.dy_px) == (0.0, 0.0)
    assert sh.confidence == pytest.approx(1.0, abs=1e-9)


def test_estimate_shift_circular_copy():
    g = gaussian_blobs(64, 30, seed=2)
    moved = np.roll(g, shift=(-2, 3), axis=(0, 1))  # dx = 3, dy = -2
    sh = estimate_shift(g, moved)
    assert (sh.dx_px, sh.dy_px) == (3.0, -2.0)


def test_estimate_shift_matches_exhaustive_oracle():
    rng = np.random.default_rng(3)
    for _ in range(5):
        ref = gaussian_blobs(32, 12, seed=int(rng.integers(1e6)))
        mov = ref + 0.2 * rng.normal(size=ref.shape)
        mov = np.roll(mov, shift=tuple(rng.integers(-3, 4, 2)), axis=(0, 1))
        sh = estimate_shift(ref, mov, search_px=5)
        dy, dx, c = ncc_shift(ref, mov, 5)
        assert (sh.dy_px, sh.dx_px) == (dy, dx)
        assert sh.confidence == pytest.approx(min(1.0, max(0.0, c)), abs=1e-9)


def test_independent_noise_has_low_confidence():
    # measured peak over 100 pairs of 64x64 white noise is about 0.06
    rng = np.random.default_rng(4)
    peaks = [estimate_shift(rng.normal(size=(64, 64)), rng.normal(size=(64, 64))).confidence for _ in range(100)]
    assert max(peaks) < 0.5


def test_estimate_shift_errors():
    with pytest.raises(DegenerateInputError):
        estimate_shift(np.ones((32, 32)), np.random.default_rng(0).random((32, 32)))
    with pytest.raises(InvalidArgumentError):
        estimate_shift(np.ones((8, 8)), np.ones((8, 8)))
    with pytest.raises(InvalidArgumentError):
        estimate_shift(np.ones((32, 32)), np.ones((32, 16)))


def test_estimate_shift_fills_nan_with_mean():
    g = gaussian_blobs(48, 20, seed=5)
    m = np.roll(g, (1, 2), axis=(0, 1))
    m[10, 10] = np.nan
    sh = estimate_shift(g, m)
    assert (sh.dx_px, sh.dy_px) == (2.0, 1.0)


def test_pixel_shift_confidence_bounds():
    with pytest.raises(InvalidArgumentError):
        PixelShift(0, 0, 1.5)
    assert PixelShift(3, 4).magnitude == 5.0


def test_apply_shift_zero_is_identity():
    s = stack_of(np.random.default_rng(0).random((6, 6)))
    assert apply_shift(s, PixelShift(0, 0)) == s


def test_apply_shift_there_and_back():
    g = np.arange(20.0).reshape(4, 5)
    out = apply_shift(apply_shift(stack_of(g), PixelShift(1, 0)), PixelShift(-1, 0)).data[0]
    # the first pass exposes the last column; the second pass exposes the first
    assert np.isnan(out[:, 0]).all()
    assert np.array_equal(out[:, 1:], g[:, 1:])


@given(st.integers(-5, 5), st.integers(-5, 5))
def test_register_round_trip(dx, dy):
    # texture keeps the one-pixel autocorrelation well below the peak, so the
    # mean-filled border left by apply_shift cannot tip the argmax
    ref = gaussian_blobs(48, 25, seed=11) + 0.5 * np.random.default_rng(11).normal(size=(48, 48))
    moving = stack_of(np.roll(ref, (dy, dx), axis=(0, 1)))
    fixed, shift = register(stack_of(ref), moving, "b0")
    assert (shift.dx_px, shift.dy_px) == (dx, dy)
    again = estimate_shift(ref, fixed.band("b0"))
    assert (again.dx_px, again.dy_px) == (0.0, 0.0)


# --- ensembles -----------------------------------------------------------------


def test_mapset_requires_consistent_maps():
    a = stack_of(np.zeros((4, 4)), px=1.0)
    b = stack_of(np.zeros((4, 4)), px=2.0)
    with pytest.raises(InvalidSpecError):
        MapSet(1, "scheduled", [a, b])
    assert MapSet(1, MapKind.SCHEDULED).is_void


def test_ensemble_validation():
    a = stack_of(np.zeros((4, 4)))
    with pytest.raises(InvalidSpecError):
        SensorEnsemble([], [])
    with pytest.raises(InvalidSpecError):
        SensorEnsemble([MapSet(1, "scheduled", [a])], [MapSet(1, "on_demand", [a])])
    with pytest.raises(InvalidSpecError):
        SensorEnsemble([MapSet(1, "on_demand", [a])], [])
    e = SensorEnsemble([MapSet(1, "scheduled", [a])], [MapSet(2, "on_demand", [a, a])])
    assert (e.n_scheduled, e.n_on_demand, e.n_sensors) == (1, 1, 2)
    assert len(e.on_demand_maps()) == 2
