import json

import numpy as np
import pytest

from agrosr.errors import InvalidSpecError
from agrosr.io import (
    BSF_MAGIC,
    labels_to_rgb,
    load_ensemble,
    read_bsf,
    read_json,
    read_labels,
    read_manifest,
    read_pnm,
    read_regime_spec,
    to_gray8,
    write_bsf,
    write_json,
    write_labels,
    write_manifest,
    write_pgm,
    write_ppm,
    write_regime_spec,
)
from agrosr.labels import LabelRaster, RectRegion, RegimeSpec, SectorRegion
from agrosr.raster import BandInfo, BandStack, MapKind


def _stack(rng, date="2020-03-04", px=0.5):
    data = rng.random((2, 5, 7)).astype(np.float32)
    data[1, 2, 3] = np.nan
    return BandStack(data, [BandInfo("nir", 842.0, "reflectance"), BandInfo("thermal", None, "celsius")], px, date)


def test_bsf_round_trip(tmp_path, rng):
    s = _stack(rng)
    path = write_bsf(tmp_path / "a.bsf", s)
    raw = path.read_bytes()
    assert raw.startswith(BSF_MAGIC)
    header = json.loads(raw[len(BSF_MAGIC):].split(b"\n", 1)[0])
    assert set(header) == {"width_px", "height_px", "pixel_size_m", "acquisition_date", "bands"}
    assert header["bands"][0] == {"name": "nir", "center_wavelength_nm": 842.0, "units": "reflectance"}
    back = read_bsf(path)
    assert back.bands == s.bands and back.pixel_size_m == s.pixel_size_m
    assert back.acquisition_date == s.acquisition_date
    assert np.array_equal(back.data, s.data, equal_nan=True)
    # payload is little-endian float32, band-sequential
    assert len(raw) - raw.index(b"\n", len(BSF_MAGIC)) - 1 == 2 * 5 * 7 * 4


def test_bsf_rejects_bad_files(tmp_path, rng):
    bad = tmp_path / "bad.bsf"
    bad.write_bytes(b"NOPE\n{}\n")
    with pytest.raises(InvalidSpecError):
        read_bsf(bad)
    good = write_bsf(tmp_path / "g.bsf", _stack(rng)).read_bytes()
    (tmp_path / "short.bsf").write_bytes(good[:-4])
    with pytest.raises(InvalidSpecError):
        read_bsf(tmp_path / "short.bsf")


def test_labels_round_trip(tmp_path):
    lab = LabelRaster(np.array([[0, 60, -1], [120, 100, 0]]), ((0, "0"), (60, "60"), (100, "100"), (120, "120")))
    assert read_labels(write_labels(tmp_path / "l.lbl", lab)) == lab
    with pytest.raises(InvalidSpecError):
        read_labels(write_bsf(tmp_path / "x.bsf", BandStack(np.zeros((1, 2, 2)), ["red"], 1.0)))


def test_manifest_round_trip_and_ensemble(tmp_path, rng):
    a = write_bsf(tmp_path / "maps" / "s1.bsf", _stack(rng, "2020-03-04", 1.0))
    b = write_bsf(tmp_path / "maps" / "s0.bsf", _stack(rng, "2020-03-01", 1.0))
    c = write_bsf(tmp_path / "maps" / "d.bsf", _stack(rng, "2020-03-04", 0.5))
    man = write_manifest(tmp_path / "m.csv", [(1, "scheduled", a, "2020-03-04"), (1, "scheduled", b, "2020-03-01"),
                                              (2, "on_demand", c, "2020-03-04")])
    text = man.read_text().splitlines()
    assert text[0] == "sensor_id,kind,path,date"
    assert text[1] == "1,scheduled,maps/s1.bsf,2020-03-04"
    rows = read_manifest(man)
    assert rows[2]["kind"] is MapKind.ON_DEMAND
    ens = load_ensemble(man)
    assert [str(m.acquisition_date) for m in ens.scheduled_maps()] == ["2020-03-01", "2020-03-04"]
    assert ens.on_demand_maps()[0].pixel_size_m == 0.5


def test_manifest_errors(tmp_path, rng):
    (tmp_path / "h.csv").write_text("sensor,kind,path,date\n")
    with pytest.raises(InvalidSpecError, match="header"):
        read_manifest(tmp_path / "h.csv")
    (tmp_path / "r.csv").write_text("sensor_id,kind,path,date\n1,satellite,x.bsf,2020-01-01\n")
    with pytest.raises(InvalidSpecError, match=":2"):
        read_manifest(tmp_path / "r.csv")
    (tmp_path / "e.csv").write_text("sensor_id,kind,path,date\n")
    with pytest.raises(InvalidSpecError):
        read_manifest(tmp_path / "e.csv")
    p = write_bsf(tmp_path / "a.bsf", _stack(rng, "2020-03-04"))
    write_manifest(tmp_path / "d.csv", [(1, "scheduled", p, "2020-03-05")])
    with pytest.raises(InvalidSpecError, match="differs"):
        load_ensemble(tmp_path / "d.csv")


def test_json_helpers(tmp_path):
    write_json(tmp_path / "o.json", {"b": 1, "a": [1.5]})
    assert (tmp_path / "o.json").read_text().index('"a"') < (tmp_path / "o.json").read_text().index('"b"')
    assert read_json(tmp_path / "o.json") == {"a": [1.5], "b": 1}
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(InvalidSpecError):
        read_json(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[1]")
    with pytest.raises(InvalidSpecError):
        read_json(tmp_path / "list.json")
    spec = RegimeSpec([RectRegion(0, 0, 0, 3, 3), SectorRegion(60, 8, 8, 4, 0, 90)])
    assert read_regime_spec(write_regime_spec(tmp_path / "r.json", spec)) == spec


def test_images(tmp_path):
    grid = np.array([[0.0, 0.5], [1.0, np.nan]])
    assert to_gray8(grid).tolist() == [[0, 128], [255, 0]]
    assert np.array_equal(read_pnm(write_pgm(tmp_path / "g.pgm", grid)), to_gray8(grid))
    lab = LabelRaster(np.array([[0, 1], [-1, 1]]), ((0, "a"), (1, "b")))
    rgb = labels_to_rgb(lab)
    assert rgb[1, 0].tolist() == [0, 0, 0]
    assert rgb[0, 1].tolist() == rgb[1, 1].tolist() != rgb[0, 0].tolist()
    assert np.array_equal(read_pnm(write_ppm(tmp_path / "l.ppm", rgb)), rgb)
