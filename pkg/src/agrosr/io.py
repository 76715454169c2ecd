"""On-disk formats: band-stack files, label files, manifests, JSON specs, PGM/PPM dumps.

A band-stack file (.bsf) is a magic line, one line of JSON with the raster
header, then float32 little-endian planes (band-sequential, row-major).
Label files (.lbl) use the same layout with an int32 plane.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
from pathlib import Path

import numpy as np

from .errors import InvalidSpecError
from .labels import UNLABELED, LabelRaster, RegimeSpec
from .raster import BandInfo, BandStack, MapKind, MapSet, SensorEnsemble

BSF_MAGIC = b"BSF 1\n"
LABEL_MAGIC = b"AGROSR-LABELS 1\n"
MANIFEST_FIELDS = ("sensor_id", "kind", "path", "date")
BSF_HEADER_FIELDS = ("width_px", "height_px", "pixel_size_m", "acquisition_date", "bands")


def _read_framed(path, magic: bytes) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if not raw.startswith(magic):
        raise InvalidSpecError(f"{path}: not a {magic.decode().split()[0]} file")
    end = raw.find(b"\n", len(magic))
    if end < 0:
        raise InvalidSpecError(f"{path}: truncated header")
    try:
        header = json.loads(raw[len(magic):end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidSpecError(f"{path}: bad header ({exc})") from None
    return header, raw[end + 1:]


def _write_framed(path, magic: bytes, header: dict, payload: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    line = json.dumps(header, separators=(",", ":"), sort_keys=False).encode("utf-8")
    path.write_bytes(magic + line + b"\n" + payload)
    return path


def bsf_header(stack: BandStack) -> dict:
    return {
        "width_px": stack.width_px,
        "height_px": stack.height_px,
        "pixel_size_m": stack.pixel_size_m,
        "acquisition_date": stack.acquisition_date.isoformat(),
        "bands": [
            {"name": b.name, "center_wavelength_nm": b.center_wavelength_nm, "units": b.units}
            for b in stack.bands
        ],
    }


def write_bsf(path, stack: BandStack) -> Path:
    payload = np.ascontiguousarray(stack.data, dtype="<f4").tobytes()
    return _write_framed(path, BSF_MAGIC, bsf_header(stack), payload)


def read_bsf(path) -> BandStack:
    header, payload = _read_framed(path, BSF_MAGIC)
    missing = [k for k in BSF_HEADER_FIELDS if k not in header]
    if missing:
        raise InvalidSpecError(f"{path}: header lacks {missing}")
    w, h = int(header["width_px"]), int(header["height_px"])
    bands = [BandInfo(b["name"], b.get("center_wavelength_nm"), b.get("units", "reflectance")) for b in header["bands"]]
    expected = len(bands) * h * w * 4
    if len(payload) != expected:
        raise InvalidSpecError(f"{path}: expected {expected} data bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(len(bands), h, w)
    try:
        date = _dt.date.fromisoformat(header["acquisition_date"])
    except (TypeError, ValueError):
        raise InvalidSpecError(f"{path}: bad acquisition_date {header['acquisition_date']!r}") from None
    return BandStack(data, bands, float(header["pixel_size_m"]), date)


def write_labels(path, labels: LabelRaster) -> Path:
    header = {
        "width_px": labels.width_px,
        "height_px": labels.height_px,
        "unlabeled": UNLABELED,
        "classes": [[i, n] for i, n in labels.classes],
    }
    return _write_framed(path, LABEL_MAGIC, header, np.ascontiguousarray(labels.data, dtype="<i4").tobytes())


def read_labels(path) -> LabelRaster:
    header, payload = _read_framed(path, LABEL_MAGIC)
    w, h = int(header["width_px"]), int(header["height_px"])
    if len(payload) != w * h * 4:
        raise InvalidSpecError(f"{path}: expected {w * h * 4} label bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype="<i4").reshape(h, w)
    return LabelRaster(data.copy(), tuple((int(i), str(n)) for i, n in header["classes"]))


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------


def write_manifest(path, rows) -> Path:
    """``rows`` are (sensor_id, kind, path, date); paths are stored relative to the manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(MANIFEST_FIELDS)
        for sid, kind, p, date in rows:
            p = Path(p).resolve()
            try:
                p = p.relative_to(base)
            except ValueError:
                pass
            wr.writerow([int(sid), MapKind(kind).value, p.as_posix(), str(date)])
    return path


def read_manifest(path) -> list[dict]:
    path = Path(path)
    with path.open(newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames is None or tuple(f.strip() for f in rd.fieldnames) != MANIFEST_FIELDS:
            raise InvalidSpecError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
        rows = []
        for n, r in enumerate(rd, start=2):
            try:
                rows.append({
                    "sensor_id": int(r["sensor_id"]),
                    "kind": MapKind(r["kind"].strip()),
                    "path": (path.parent / r["path"].strip()),
                    "date": _dt.date.fromisoformat(r["date"].strip()),
                })
            except (ValueError, AttributeError) as exc:
                raise InvalidSpecError(f"{path}:{n}: bad manifest row ({exc})") from None
    if not rows:
        raise InvalidSpecError(f"{path}: manifest lists no maps")
    return rows


def load_ensemble(manifest) -> SensorEnsemble:
    """Read every map listed in a manifest and group them by sensor.

    A manifest date that disagrees with the file header is an error.
    """
    groups: dict[int, tuple[MapKind, list]] = {}
    for r in read_manifest(manifest):
        stack = read_bsf(r["path"])
        if stack.acquisition_date != r["date"]:
            raise InvalidSpecError(
                f"{r['path']}: header date {stack.acquisition_date} differs from manifest date {r['date']}"
            )
        kind, maps = groups.setdefault(r["sensor_id"], (r["kind"], []))
        if kind is not r["kind"]:
            raise InvalidSpecError(f"sensor {r['sensor_id']} is listed with two kinds")
        maps.append(stack)
    scheduled, on_demand = [], []
    for sid in sorted(groups):
        kind, maps = groups[sid]
        maps.sort(key=lambda m: m.acquisition_date)
        (scheduled if kind is MapKind.SCHEDULED else on_demand).append(MapSet(sid, kind, maps))
    return SensorEnsemble(scheduled, on_demand)


# --------------------------------------------------------------------------
# JSON specs
# --------------------------------------------------------------------------


def read_json(path) -> dict:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidSpecError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise InvalidSpecError(f"{path}: expected a JSON object")
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


def read_regime_spec(path) -> RegimeSpec:
    return RegimeSpec.from_dict(read_json(path))


def write_regime_spec(path, spec: RegimeSpec) -> Path:
    return write_json(path, spec.to_dict())


# --------------------------------------------------------------------------
# portable images
# --------------------------------------------------------------------------

# class colours for label dumps; unlabeled cells are black
PALETTE = np.array(
    [[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
     [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212]],
    dtype=np.uint8,
)


def to_gray8(grid: np.ndarray, vmin: float | None = None, vmax: float | None = None) -> np.ndarray:
    """Linear stretch to 0..255; NaN cells become 0."""
    g = np.asarray(grid, dtype=np.float64)
    finite = np.isfinite(g)
    if vmin is None:
        vmin = float(g[finite].min()) if finite.any() else 0.0
    if vmax is None:
        vmax = float(g[finite].max()) if finite.any() else 1.0
    span = vmax - vmin if vmax > vmin else 1.0
    out = np.clip((np.where(finite, g, vmin) - vmin) / span, 0.0, 1.0)
    out = np.rint(out * 255.0).astype(np.uint8)
    out[~finite] = 0
    return out


def write_pgm(path, grid: np.ndarray, vmin: float | None = None, vmax: float | None = None) -> Path:
    img = grid if grid.dtype == np.uint8 else to_gray8(grid, vmin, vmax)
    h, w = img.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes())
    return path


def write_ppm(path, rgb: np.ndarray) -> Path:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("PPM data must have shape (h, w, 3)")
    h, w, _ = rgb.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb).tobytes())
    return path


def labels_to_rgb(labels: LabelRaster) -> np.ndarray:
    idx = labels.to_index()
    rgb = np.zeros(idx.shape + (3,), dtype=np.uint8)
    ok = idx >= 0
    rgb[ok] = PALETTE[idx[ok] % len(PALETTE)]
    return rgb


def read_pnm(path) -> np.ndarray:
    """Minimal reader for the binary P5/P6 files written above (used by tests)."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    magic, dims, _maxval, body = parts
    w, h = (int(v) for v in dims.split())
    if magic == b"P5":
        return np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    if magic == b"P6":
        return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    raise ValueError(f"{path}: unsupported portable image {magic!r}")
