import json

import numpy as np
import pytest

from agrosr.audit import (
    INSUFFICIENT,
    AuditThresholds,
    audit,
    band_snr_db,
    histogram_l1,
    noise_variance,
)
from agrosr.errors import InvalidArgumentError
from agrosr.raster import BandStack, MapKind, MapSet, SensorEnsemble, downscale
from agrosr.synth import FieldSpec, simulate_ensemble
from oracles import gaussian_blobs


def _ens(scheduled, on_demand=()):
    sets = [MapSet(1, MapKind.SCHEDULED, list(scheduled))]
    od = [MapSet(2, MapKind.ON_DEMAND, list(on_demand))] if on_demand else []
    return SensorEnsemble(sets, od)


def _smooth(size=64, seed=0, px=1.0, date="2020-01-01"):
    return BandStack(gaussian_blobs(size, 12, seed, (6.0, 14.0))[None] + 2.0, ["nir"], px, date)


def test_sub_pixel_feature_fails():
    rep = audit(_ens([_smooth(px=5.0)]), 0.5)
    assert rep.items["item1"]["value"] == pytest.approx(0.1)
    assert rep.items["item1"]["verdict"] == "fail"
    assert rep.overall == "fail"


def test_feature_ratio_boundary_passes():
    assert audit(_ens([_smooth(px=2.0)]), 2.0).items["item1"]["verdict"] == "pass"


def test_large_resolution_gap_warns():
    hi = _smooth(size=200, px=0.05)
    lo = BandStack(np.ones((1, 2, 2)), ["nir"], 5.0, "2020-01-01")
    rep = audit(_ens([lo], [hi]), 10.0)
    assert rep.items["item2"]["value"] == pytest.approx(100.0)
    assert rep.items["item2"]["verdict"] == "warn"
    assert rep.items["item2"]["threshold"] == 16.0


def test_date_gain_drift():
    spec = FieldSpec(width_px=64, height_px=64, n_strips=8, seed=2, dates=("2020-01-01", "2020-01-08"),
                     date_gains=(1.0, 1.3), registration_offset_px=((0, 0), (0, 0)))
    rep = audit(simulate_ensemble(spec, 2)[0], 1.0)
    item = rep.items["item5"]
    assert item["value"] == pytest.approx(0.3, abs=1e-5)
    assert item["verdict"] == "fail"
    spec.date_gains = (1.0, 1.0)
    item = audit(simulate_ensemble(spec, 2)[0], 1.0).items["item5"]
    assert item["value"] == 0.0 and item["verdict"] == "pass"
    assert all(v == 0.0 for v in item["histogram_l1"].values())


def test_pure_noise_snr_low():
    rng = np.random.default_rng(0)
    stack = BandStack(rng.normal(0.5, 0.1, (3, 128, 128)), ["red", "green", "nir"], 1.0)
    assert all(v <= 3.0 for v in band_snr_db(stack).values())
    # the residual estimator is unbiased for white noise
    assert noise_variance(rng.normal(0, 0.2, (256, 256))) == pytest.approx(0.04, rel=0.05)


def test_smooth_field_snr_high():
    assert band_snr_db(_smooth(128))["nir"] >= 30.0
    rep = audit(_ens([_smooth(128)]), 5.0)
    assert rep.items["item3"]["verdict"] == "pass"


def test_white_reference_band():
    rng = np.random.default_rng(1)
    signal = gaussian_blobs(64, 10, 3)
    noise_sd = 0.05
    data = np.stack([signal + rng.normal(0, noise_sd, signal.shape), 1.0 + rng.normal(0, noise_sd, signal.shape)])
    snr = band_snr_db(BandStack(data, ["nir", "white_ref"], 1.0))
    assert set(snr) == {"nir"}
    expected = 10 * np.log10(np.var(data[0]) / noise_sd ** 2)
    assert snr["nir"] == pytest.approx(expected, abs=0.5)


def test_registration_offset_detected():
    hi = BandStack(gaussian_blobs(128, 30, 4, (3.0, 6.0))[None], ["nir"], 0.5, "2020-01-01")
    lo = downscale(hi, 2)
    shifted = lo.with_data(np.roll(lo.data, (0, 3), axis=(1, 2)))
    good = audit(_ens([lo], [hi]), 5.0).items["item4"]
    bad = audit(_ens([shifted], [hi]), 5.0).items["item4"]
    assert good["value"] == 0.0 and good["verdict"] == "pass"
    assert bad["value"] == pytest.approx(3.0) and bad["verdict"] == "fail"


def test_insufficient_data_warns():
    rep = audit(_ens([_smooth()]), 2.0)
    for key in ("item2", "item4", "item5"):
        assert rep.items[key]["verdict"] == INSUFFICIENT
        assert rep.items[key]["value"] is None
    assert rep.overall == "warn"
    assert "n/a" in rep.summary_line()


def test_report_shape_and_determinism():
    spec = FieldSpec(width_px=64, height_px=64, n_strips=8, seed=5, dates=("2020-01-01", "2020-01-08"),
                     date_gains=(1.0, 1.05), registration_offset_px=((0, 0), (1, 0)))
    ens = simulate_ensemble(spec, 2)[0]
    a, b = audit(ens, 0.2), audit(ens, 0.2)
    assert a.to_json() == b.to_json()
    d = json.loads(a.to_json())
    assert set(d) == {f"item{i}" for i in range(1, 6)}
    for item in d.values():
        assert {"value", "threshold", "verdict"} <= set(item)


def test_thresholds_override_and_echo():
    th = AuditThresholds(min_feature_ratio=0.05)
    item = audit(_ens([_smooth(px=5.0)]), 0.5, th).items["item1"]
    assert item["threshold"] == 0.05 and item["verdict"] == "pass"
    with pytest.raises(InvalidArgumentError):
        AuditThresholds.from_dict({"min_snr": 3})


@pytest.mark.parametrize("bad", [0.0, -1.0, float("nan"), float("inf")])
def test_invalid_feature_size(bad):
    with pytest.raises(InvalidArgumentError):
        audit(_ens([_smooth()]), bad)


def test_histogram_l1_bounds(rng):
    a = rng.random(500)
    assert histogram_l1(a, a) == 0.0
    assert histogram_l1(a, a + 10) == pytest.approx(2.0)
