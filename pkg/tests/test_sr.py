"""Patch pairing, the interpolation control and model application."""

import numpy as np
import pytest

from agrosr.errors import EmptyDatasetError, MissingBandError, ResolutionMismatchError, UnsupportedTaskError
from agrosr.raster import BandStack, MapKind, MapSet, SensorEnsemble, downscale
from agrosr.sr import (
    SRTaskSpec,
    apply_sr,
    fit_conv_net,
    fit_interp_baseline,
    fit_patch_linear,
    load_model,
    make_training_pairs,
    pairs_from_stacks,
    save_model,
    similarity,
    write_loss_curve,
)

RGB = ("blue", "green", "red")


def _ensemble(lo, hi):
    return SensorEnsemble([MapSet(1, MapKind.SCHEDULED, [lo])], [MapSet(2, MapKind.ON_DEMAND, [hi])])


def _lo_hi(rng, size_lo=16, factor=2, bands=("red",)):
    hi = BandStack(rng.random((len(bands), size_lo * factor, size_lo * factor)), bands, 0.1)
    return downscale(hi, factor), hi


def test_pair_count_on_stride_grid(rng):
    # patch sizes are odd; 7 with stride 8 on a 16-wide grid still gives starts {0, 8}
    lo, hi = _lo_hi(rng)
    task = SRTaskSpec(("red",), ("red",), 2, patch_size_lo=7, stride=8)
    pairs = make_training_pairs(_ensemble(lo, hi), task)
    assert len(pairs) == 4
    assert pairs.lo.shape == (4, 1, 7, 7) and pairs.hi.shape == (4, 1, 14, 14)
    assert sorted(map(tuple, pairs.positions)) == [(0, 0), (0, 8), (8, 0), (8, 8)]
    y, x = pairs.positions[0]
    assert np.array_equal(pairs.hi[0, 0], hi.data[0, 2 * y: 2 * y + 14, 2 * x: 2 * x + 14])


def test_nan_stripe_excluded(rng):
    lo, hi = _lo_hi(rng)
    arr = lo.data.copy()
    arr[:, :, 5] = np.nan
    lo = lo.with_data(arr)
    task = SRTaskSpec(("red",), ("red",), 2, patch_size_lo=3, stride=1)
    pairs = pairs_from_stacks(lo, hi, task)
    xs = pairs.positions[:, 1]
    assert not np.any((xs <= 5) & (xs + 3 > 5))
    assert not np.isnan(pairs.lo).any()
    assert len(pairs) == 14 * (14 - 3)


def test_channel_synthesis_pairs(rng):
    stack = BandStack(rng.random((4, 12, 12)), RGB + ("thermal",), 0.1)
    task = SRTaskSpec(RGB, ("thermal",), 1, patch_size_lo=3, stride=3)
    pairs = pairs_from_stacks(stack, stack, task)
    assert pairs.lo.shape[1:] == (3, 3, 3)
    assert pairs.hi.shape[1:] == (1, 3, 3)


def test_resolution_mismatch(rng):
    lo, hi = _lo_hi(rng, factor=4)
    with pytest.raises(ResolutionMismatchError):
        pairs_from_stacks(lo, hi, SRTaskSpec(("red",), ("red",), 2, 3, 1))


def test_all_nan_is_empty(rng):
    lo, hi = _lo_hi(rng)
    lo = lo.with_data(np.full(lo.data.shape, np.nan))
    with pytest.raises(EmptyDatasetError):
        make_training_pairs(_ensemble(lo, hi), SRTaskSpec(("red",), ("red",), 2, 3, 1))


def test_seeded_order_is_deterministic(rng):
    lo, hi = _lo_hi(rng)
    task = SRTaskSpec(("red",), ("red",), 2, 3, 2)
    a = make_training_pairs(_ensemble(lo, hi), task, seed=3)
    b = make_training_pairs(_ensemble(lo, hi), task, seed=3)
    assert np.array_equal(a.positions, b.positions)
    assert not np.array_equal(a.positions, make_training_pairs(_ensemble(lo, hi), task).positions)


def test_task_validation():
    with pytest.raises(ValueError):
        SRTaskSpec(("red",), ("red",), 2, patch_size_lo=4)
    with pytest.raises(ValueError):
        SRTaskSpec(("red",), ("red",), 3)
    with pytest.raises(ValueError):
        SRTaskSpec((), ("red",), 2)


# ---- interpolation control


def test_baseline_rejects_channel_synthesis():
    with pytest.raises(UnsupportedTaskError):
        fit_interp_baseline(SRTaskSpec(RGB, ("thermal",), 1))


def test_baseline_doubles_dims(rng):
    model = fit_interp_baseline(SRTaskSpec(("red",), ("red",), 2))
    out = apply_sr(model, BandStack(rng.random((1, 8, 8)), ["red"], 0.2))
    assert out.data.shape == (1, 16, 16)
    assert out.pixel_size_m == pytest.approx(0.1)


def test_baseline_psnr_finite(small_field):
    _, ensemble, _, _ = small_field
    lo, hi = ensemble.scheduled_maps()[0], ensemble.on_demand_maps()[0]
    model = fit_interp_baseline(SRTaskSpec(("nir",), ("nir",), 2))
    rep = similarity(apply_sr(model, lo), hi.select(["nir"]))
    assert np.isfinite(rep.psnr_db) and rep.psnr_db > 10


# ---- apply


@pytest.mark.parametrize("factor", [1, 2, 4])
def test_output_dims_scale(rng, factor):
    lo, hi = _lo_hi(rng, size_lo=12, factor=factor)
    task = SRTaskSpec(("red",), ("red",), factor, 3, 1)
    pairs = make_training_pairs(_ensemble(lo, hi), task)
    for model in (fit_patch_linear(pairs), fit_conv_net(pairs, epochs=1)):
        out = apply_sr(model, BandStack(rng.random((1, 9, 7)), ["red"], lo.pixel_size_m), stride=2)
        assert out.data.shape == (1, 9 * factor, 7 * factor)
        assert not np.isnan(out.data).any()


def test_channel_synthesis_apply(rng):
    stack = BandStack(rng.random((4, 20, 20)), RGB + ("thermal",), 0.1)
    pairs = pairs_from_stacks(stack, stack, SRTaskSpec(RGB, ("thermal",), 1, 3, 1))
    out = apply_sr(fit_patch_linear(pairs), stack.select(RGB))
    assert out.band_names == ("thermal",)
    assert out.data.shape == (1, 20, 20)


def test_patch_linear_warns_on_few_pairs(rng):
    stack = BandStack(rng.random((3, 12, 12)), RGB, 0.1)
    pairs = pairs_from_stacks(stack, stack, SRTaskSpec(RGB, ("red",), 1, 3, 1))
    with pytest.warns(UserWarning, match="recommended"):
        fit_patch_linear(pairs)


def test_apply_missing_band(rng):
    stack = BandStack(rng.random((3, 20, 20)), RGB, 0.1)
    pairs = pairs_from_stacks(stack, stack, SRTaskSpec(RGB, ("red",), 1, 3, 1))
    with pytest.raises(MissingBandError):
        apply_sr(fit_patch_linear(pairs), stack.select(["red"]))


def test_apply_nan_footprint(rng):
    lo, hi = _lo_hi(rng)
    model = fit_patch_linear(pairs_from_stacks(lo, hi, SRTaskSpec(("red",), ("red",), 2, 3, 1)))
    arr = lo.data.copy()
    arr[0, 4, 6] = np.nan
    out = apply_sr(model, lo.with_data(arr))
    assert np.isnan(out.data[0, 8:10, 12:14]).all()
    assert np.isfinite(np.delete(out.data[0], np.s_[8:10], axis=0)).all()


def test_model_round_trip(tmp_path, rng):
    lo, hi = _lo_hi(rng)
    task = SRTaskSpec(("red",), ("red",), 2, 3, 1)
    pairs = make_training_pairs(_ensemble(lo, hi), task)
    for model in (fit_patch_linear(pairs), fit_conv_net(pairs, epochs=2, seed=1)):
        path = tmp_path / f"{model.kind}.bin"
        save_model(model, path)
        back = load_model(path)
        assert back.kind == model.kind and back.task == model.task
        # parameters are stored as float32
        assert np.allclose(apply_sr(back, lo).data, apply_sr(model, lo).data, atol=1e-5)
        save_model(back, tmp_path / "again.bin")
        assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()
    write_loss_curve(model, tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_mse,val_mse" and len(lines) == 3


def test_overflowing_output_is_divergence(rng):
    from agrosr.errors import DivergenceError

    lo, hi = _lo_hi(rng)
    model = fit_patch_linear(pairs_from_stacks(lo, hi, SRTaskSpec(("red",), ("red",), 2, 3, 1)))
    model.params[0] = model.params[0] * 1e300
    with pytest.raises(DivergenceError):
        apply_sr(model, lo)
