"""Band-stack data model, resampling and pixel-space registration."""

from __future__ import annotations

import datetime as _dt
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import (
    DegenerateInputError,
    InvalidArgumentError,
    InvalidSpecError,
    MissingBandError,
    ResolutionMismatchError,
)


@dataclass(frozen=True)
class BandInfo:
    name: str
    center_wavelength_nm: float | None = None
    units: str = "reflectance"

    def __post_init__(self):
        if not self.name:
            raise InvalidArgumentError("band name must be non-empty")
        if self.center_wavelength_nm is not None and not self.center_wavelength_nm > 0:
            raise InvalidArgumentError("center_wavelength_nm must be positive")


# common band definitions used by the synthetic generator and the CLI
STANDARD_BANDS = {
    "blue": BandInfo("blue", 475.0, "reflectance"),
    "green": BandInfo("green", 560.0, "reflectance"),
    "red": BandInfo("red", 668.0, "reflectance"),
    "nir": BandInfo("nir", 842.0, "reflectance"),
    "thermal": BandInfo("thermal", 10900.0, "degC"),
}


class BandStack:
    """A multi-band raster at one date and one resolution.

    ``data`` has shape (bands, height, width) and dtype float32, with NaN as
    nodata. Instances are treated as immutable: the array is marked
    read-only and every operation returns a new stack.
    """

    __slots__ = ("bands", "data", "pixel_size_m", "acquisition_date")

    def __init__(
        self,
        data: np.ndarray,
        bands: Sequence[BandInfo | str],
        pixel_size_m: float,
        acquisition_date: _dt.date | str | None = None,
    ):
        arr = np.array(data, dtype=np.float32, copy=True)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise InvalidArgumentError(f"band data must be 2D or 3D, got shape {arr.shape}")
        infos = tuple(STANDARD_BANDS.get(b, BandInfo(b)) if isinstance(b, str) else b for b in bands)
        if len(infos) != arr.shape[0]:
            raise InvalidArgumentError(f"{len(infos)} band descriptors for {arr.shape[0]} bands")
        names = [b.name for b in infos]
        if len(set(names)) != len(names):
            raise InvalidArgumentError(f"duplicate band names in {names}")
        if arr.shape[1] < 1 or arr.shape[2] < 1:
            raise InvalidArgumentError("raster must be at least 1x1")
        if not (isinstance(pixel_size_m, (int, float, np.floating)) and pixel_size_m > 0 and math.isfinite(pixel_size_m)):
            raise InvalidArgumentError(f"pixel_size_m must be a positive real, got {pixel_size_m!r}")
        if np.isinf(arr).any():
            raise InvalidArgumentError("band data must not contain infinities")
        if acquisition_date is None:
            acquisition_date = _dt.date(1970, 1, 1)
        elif isinstance(acquisition_date, str):
            acquisition_date = _dt.date.fromisoformat(acquisition_date)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "bands", infos)
        object.__setattr__(self, "pixel_size_m", float(pixel_size_m))
        object.__setattr__(self, "acquisition_date", acquisition_date)

    def __setattr__(self, name, value):
        raise AttributeError("BandStack is immutable")

    @property
    def width_px(self) -> int:
        return self.data.shape[2]

    @property
    def height_px(self) -> int:
        return self.data.shape[1]

    @property
    def band_names(self) -> tuple[str, ...]:
        return tuple(b.name for b in self.bands)

    def band(self, name: str) -> np.ndarray:
        try:
            return self.data[self.band_names.index(name)]
        except ValueError:
            raise MissingBandError(name) from None

    def select(self, names: Iterable[str]) -> "BandStack":
        names = list(names)
        idx = []
        for n in names:
            if n not in self.band_names:
                raise MissingBandError(n)
            idx.append(self.band_names.index(n))
        return self.with_data(self.data[idx], [self.bands[i] for i in idx])

    def with_data(self, data, bands=None, pixel_size_m=None) -> "BandStack":
        return BandStack(
            data,
            self.bands if bands is None else bands,
            self.pixel_size_m if pixel_size_m is None else pixel_size_m,
            self.acquisition_date,
        )

    def with_date(self, date: _dt.date | str) -> "BandStack":
        return BandStack(self.data, self.bands, self.pixel_size_m, date)

    def __eq__(self, other):
        if not isinstance(other, BandStack):
            return NotImplemented
        return (
            self.bands == other.bands
            and self.pixel_size_m == other.pixel_size_m
            and self.acquisition_date == other.acquisition_date
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data, equal_nan=True)
        )

    __hash__ = None

    def __repr__(self):
        return (
            f"BandStack({self.width_px}x{self.height_px}, bands={list(self.band_names)}, "
            f"pixel_size_m={self.pixel_size_m:g}, date={self.acquisition_date.isoformat()})"
        )


class MapKind(str, Enum):
    SCHEDULED = "scheduled"
    ON_DEMAND = "on_demand"


@dataclass
class MapSet:
    """All maps of one sensor. An empty list is the void state."""

    sensor_id: int
    kind: MapKind
    maps: list[BandStack] = field(default_factory=list)

    def __post_init__(self):
        self.kind = MapKind(self.kind)
        if self.maps:
            first = self.maps[0]
            for m in self.maps[1:]:
                if m.band_names != first.band_names or m.pixel_size_m != first.pixel_size_m:
                    raise InvalidSpecError(
                        f"sensor {self.sensor_id}: all maps must share band list and pixel size"
                    )

    @property
    def is_void(self) -> bool:
        return not self.maps


@dataclass
class SensorEnsemble:
    scheduled_sets: list[MapSet] = field(default_factory=list)
    on_demand_sets: list[MapSet] = field(default_factory=list)

    def __post_init__(self):
        if not self.scheduled_sets and not self.on_demand_sets:
            raise InvalidSpecError("an ensemble needs at least one map set")
        ids = [s.sensor_id for s in self.all_sets]
        if len(set(ids)) != len(ids):
            raise InvalidSpecError(f"sensor ids must be distinct, got {ids}")
        for s in self.scheduled_sets:
            if s.kind is not MapKind.SCHEDULED:
                raise InvalidSpecError(f"sensor {s.sensor_id} listed as scheduled but has kind {s.kind.value}")
        for s in self.on_demand_sets:
            if s.kind is not MapKind.ON_DEMAND:
                raise InvalidSpecError(f"sensor {s.sensor_id} listed as on-demand but has kind {s.kind.value}")

    @property
    def all_sets(self) -> list[MapSet]:
        return list(self.scheduled_sets) + list(self.on_demand_sets)

    @property
    def n_scheduled(self) -> int:
        return len(self.scheduled_sets)

    @property
    def n_on_demand(self) -> int:
        return len(self.on_demand_sets)

    @property
    def n_sensors(self) -> int:
        return self.n_scheduled + self.n_on_demand

    def scheduled_maps(self) -> list[BandStack]:
        return [m for s in self.scheduled_sets for m in s.maps]

    def on_demand_maps(self) -> list[BandStack]:
        return [m for s in self.on_demand_sets for m in s.maps]


@dataclass(frozen=True)
class PixelShift:
    """Translation of a moving grid relative to a reference grid.

    ``moving[y, x] == reference[y - dy_px, x - dx_px]``.
    """

    dx_px: float
    dy_px: float
    confidence: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidArgumentError(f"confidence must be in [0, 1], got {self.confidence}")

    @property
    def magnitude(self) -> float:
        return math.hypot(self.dx_px, self.dy_px)


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------


def _check_factor(factor) -> int:
    if isinstance(factor, bool) or not isinstance(factor, (int, np.integer)):
        raise InvalidArgumentError(f"factor must be a positive integer, got {factor!r}")
    if factor < 1:
        raise InvalidArgumentError(f"factor must be >= 1, got {factor}")
    return int(factor)


def downscale(stack: BandStack, factor: int) -> BandStack:
    """Area-mean pooling by an integer factor, ignoring NaN cells.

    Trailing rows/columns that do not fill a whole block are dropped.
    """
    factor = _check_factor(factor)
    if factor == 1:
        return stack
    if stack.height_px < factor or stack.width_px < factor:
        raise InvalidArgumentError(f"factor {factor} exceeds raster size {stack.width_px}x{stack.height_px}")
    out = np.stack([_kernels.block_nanmean(b, factor) for b in stack.data])
    return stack.with_data(out, pixel_size_m=stack.pixel_size_m * factor)


def _cubic_weights(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    # Keys kernel evaluated at offsets -1, 0, 1, 2 from floor(position)
    d = np.stack([1 + t, t, 1 - t, 2 - t], axis=-1)
    ad = np.abs(d)
    w = np.where(
        ad <= 1,
        (a + 2) * ad**3 - (a + 3) * ad**2 + 1,
        np.where(ad < 2, a * ad**3 - 5 * a * ad**2 + 8 * a * ad - 4 * a, 0.0),
    )
    return w


def _axis_stencil(n_in: int, factor: int, method: str):
    """Source indices (n_out, taps) and weights for one axis."""
    pos = (np.arange(n_in * factor) + 0.5) / factor - 0.5
    base = np.floor(pos).astype(np.int64)
    t = pos - base
    if method == "bilinear":
        idx = np.stack([base, base + 1], axis=-1)
        w = np.stack([1 - t, t], axis=-1)
    else:
        idx = np.stack([base - 1, base, base + 1, base + 2], axis=-1)
        w = _cubic_weights(t)
    return np.clip(idx, 0, n_in - 1), w


def _interp_axis(grid: np.ndarray, idx: np.ndarray, w: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(grid, axis, -1)
    gathered = moved[..., idx]  # (..., n_out, taps)
    out = (gathered * w).sum(axis=-1)
    return np.moveaxis(out, -1, axis)


def upscale(stack: BandStack, factor: int, method: str = "nearest") -> BandStack:
    """Enlarge by an integer factor with nearest, bilinear or bicubic sampling.

    Interpolation clamps at the edges and poisons every output cell whose
    stencil touches a NaN.
    """
    factor = _check_factor(factor)
    if method not in ("nearest", "bilinear", "bicubic"):
        raise InvalidArgumentError(f"unknown interpolation method {method!r}")
    if factor == 1:
        return stack
    if method == "nearest":
        out = np.repeat(np.repeat(stack.data, factor, axis=1), factor, axis=2)
    else:
        grid = stack.data.astype(np.float64)
        iy, wy = _axis_stencil(stack.height_px, factor, method)
        ix, wx = _axis_stencil(stack.width_px, factor, method)
        out = _interp_axis(_interp_axis(grid, ix, wx, 2), iy, wy, 1)
    return stack.with_data(out, pixel_size_m=stack.pixel_size_m / factor)


MAX_RESAMPLE_RATIO = 64.0


def _as_integer(r: float, tol: float = 1e-6) -> int | None:
    n = round(r)
    if n >= 1 and abs(r - n) <= tol * max(1.0, r):
        return int(n)
    return None


def resample_to_resolution(stack: BandStack, target_m_per_px: float, method: str = "bilinear") -> BandStack:
    """Reach ``target_m_per_px`` by one integer down- or up-scaling step."""
    if not target_m_per_px > 0:
        raise InvalidArgumentError("target resolution must be positive")
    src = stack.pixel_size_m
    ratio = target_m_per_px / src
    if ratio > MAX_RESAMPLE_RATIO or ratio < 1.0 / MAX_RESAMPLE_RATIO:
        raise InvalidArgumentError(
            f"target {target_m_per_px} m is more than x{MAX_RESAMPLE_RATIO:g} away from {src} m"
        )
    if ratio >= 1.0:
        factor = _as_integer(ratio)
        if factor is not None:
            return downscale(stack, factor)
        lo, hi = math.floor(ratio), math.ceil(ratio)
        alternatives = tuple(src * f for f in (lo, hi) if f >= 1)
    else:
        factor = _as_integer(1.0 / ratio)
        if factor is not None:
            return upscale(stack, factor, method)
        inv = 1.0 / ratio
        alternatives = tuple(src / f for f in (math.floor(inv), math.ceil(inv)) if f >= 1)
    raise ResolutionMismatchError(
        f"cannot reach {target_m_per_px} m from {src} m with an integer factor (ratio {ratio:.4g}); "
        f"nearest achievable: {', '.join(f'{a:g}' for a in alternatives)} m",
        alternatives,
    )


def crop(stack: BandStack, x0: int, y0: int, w: int, h: int) -> BandStack:
    if w <= 0 or h <= 0:
        raise InvalidArgumentError(f"crop window must have positive area, got {w}x{h}")
    if x0 < 0 or y0 < 0 or x0 + w > stack.width_px or y0 + h > stack.height_px:
        raise InvalidArgumentError(
            f"crop window ({x0}, {y0}, {w}, {h}) outside {stack.width_px}x{stack.height_px} raster"
        )
    return stack.with_data(stack.data[:, y0: y0 + h, x0: x0 + w])


# --------------------------------------------------------------------------
# registration
# --------------------------------------------------------------------------

MIN_REGISTRATION_SIZE = 16


def _fill_nan(grid: np.ndarray) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise InvalidArgumentError("registration expects single-band 2D grids")
    nan = np.isnan(g)
    if nan.all():
        raise DegenerateInputError("grid has no finite cells")
    if nan.any():
        g = np.where(nan, g[~nan].mean(), g)
    return g


def estimate_shift(reference: np.ndarray, moving: np.ndarray, search_px: int = 8) -> PixelShift:
    """Integer translation maximizing normalized cross-correlation.

    The search radius is capped at a quarter of the smaller grid side so the
    overlap never drops below half the grid. ``confidence`` is the peak
    correlation clipped to [0, 1].
    """
    ref = _fill_nan(reference)
    mov = _fill_nan(moving)
    if ref.shape != mov.shape:
        raise InvalidArgumentError(f"grids differ in shape: {ref.shape} vs {mov.shape}")
    if min(ref.shape) < MIN_REGISTRATION_SIZE:
        raise InvalidArgumentError(f"registration needs at least {MIN_REGISTRATION_SIZE}x{MIN_REGISTRATION_SIZE} grids")
    if ref.std() == 0.0 or mov.std() == 0.0:
        raise DegenerateInputError("constant-valued grid has no correlation structure")
    search = max(0, min(int(search_px), min(ref.shape) // 4))
    dy, dx, peak = _kernels.ncc_search(ref, mov, search)
    return PixelShift(float(dx), float(dy), float(min(1.0, max(0.0, peak))))


def apply_shift(stack: BandStack, shift: PixelShift) -> BandStack:
    """Translate every band by (-dx, -dy), rounding to whole pixels.

    Exposed borders are filled with NaN.
    """
    dx = int(round(shift.dx_px))
    dy = int(round(shift.dy_px))
    h, w = stack.height_px, stack.width_px
    if abs(dx) > w or abs(dy) > h:
        raise InvalidArgumentError(f"shift ({dx}, {dy}) exceeds raster size {w}x{h}")
    if dx == 0 and dy == 0:
        return stack
    out = np.full(stack.data.shape, np.nan, dtype=np.float32)
    # out[y, x] = in[y + dy, x + dx]
    ys, ye = max(0, -dy), min(h, h - dy)
    xs, xe = max(0, -dx), min(w, w - dx)
    if ys < ye and xs < xe:
        out[:, ys:ye, xs:xe] = stack.data[:, ys + dy: ye + dy, xs + dx: xe + dx]
    return stack.with_data(out)


def register(reference: BandStack, moving: BandStack, band: str | None = None, search_px: int = 8):
    """Estimate the shift of ``moving`` against ``reference`` and undo it."""
    band = band or next(n for n in reference.band_names if n in moving.band_names)
    shift = estimate_shift(reference.band(band), moving.band(band), search_px)
    return apply_shift(moving, shift), shift
