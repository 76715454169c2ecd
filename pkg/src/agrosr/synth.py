"""Synthetic irrigated fields with known regimes.

A field is a linear mix of plant and soil spectra per cell. Vegetation cover
comes from the cell's irrigation policy plus a seeded value-noise texture at
``stripe_detail_scale_px``; thermal follows policy and cover. Scheduled
(satellite-like) maps are simulated from the on-demand map by gain, noise,
translation and area-mean downscaling.
"""

from __future__ import annotations

import datetime as _dt
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidSpecError
from .labels import (
    DEFAULT_POLICIES,
    LabelRaster,
    RectRegion,
    RegimeSpec,
    pivot_layout,
    policy_strip_layout,
    rasterize_regimes,
)
from .raster import BandStack, MapKind, MapSet, PixelShift, SensorEnsemble, apply_shift, downscale

REFLECTANCE_BANDS = ("blue", "green", "red", "nir")
ALL_BANDS = REFLECTANCE_BANDS + ("thermal",)

PLANT_SPECTRUM = {"blue": 0.04, "green": 0.12, "red": 0.05, "nir": 0.50}
SOIL_SPECTRUM = {"blue": 0.10, "green": 0.14, "red": 0.20, "nir": 0.26}


def _default_cover():
    return {0: 0.15, 60: 0.40, 100: 0.65, 120: 0.80}


def _default_offsets():
    return {0: 6.0, 60: 3.0, 100: 0.5, 120: 0.0}


@dataclass
class FieldSpec:
    width_px: int = 256
    height_px: int = 256
    pixel_size_m: float = 0.025
    layout: str = "strips"
    policies: tuple[int, ...] = DEFAULT_POLICIES
    n_strips: int | None = 48
    strip_order: str = "random"
    strip_rows: int = 2
    pivot_center: tuple[float, float] | None = None
    pivot_radius: float | None = None
    plant_spectrum: dict = field(default_factory=lambda: dict(PLANT_SPECTRUM))
    soil_spectrum: dict = field(default_factory=lambda: dict(SOIL_SPECTRUM))
    cover_by_policy: dict = field(default_factory=_default_cover)
    texture_amplitude: float = 0.1
    stripe_detail_scale_px: float = 3.0
    thermal_base_c: float = 28.0
    thermal_offset_by_policy: dict = field(default_factory=_default_offsets)
    thermal_cover_coeff: float = 6.0
    noise_sigma: float | dict = 0.01
    thermal_noise_sigma: float = 0.1
    dates: tuple[str, ...] = ("2018-06-26",)
    date_gains: tuple[float, ...] = (1.0,)
    registration_offset_px: tuple[tuple[int, int], ...] = ((0, 0),)
    seed: int = 0

    def __post_init__(self):
        self.policies = tuple(int(p) for p in self.policies)
        self.cover_by_policy = {int(k): float(v) for k, v in self.cover_by_policy.items()}
        self.thermal_offset_by_policy = {int(k): float(v) for k, v in self.thermal_offset_by_policy.items()}
        self.dates = tuple(str(d) for d in self.dates)
        self.date_gains = tuple(float(g) for g in self.date_gains)
        self.registration_offset_px = tuple(tuple(int(v) for v in o) for o in self.registration_offset_px)
        if self.pivot_center is not None:
            self.pivot_center = tuple(float(v) for v in self.pivot_center)
        self.validate()

    def validate(self) -> None:
        if self.width_px < 1 or self.height_px < 1:
            raise InvalidSpecError("field dims must be positive")
        if not self.pixel_size_m > 0:
            raise InvalidSpecError("pixel_size_m must be positive")
        if self.layout not in ("strips", "pivot"):
            raise InvalidSpecError(f"unknown layout {self.layout!r}")
        if self.strip_order not in ("cyclic", "random"):
            raise InvalidSpecError(f"unknown strip_order {self.strip_order!r}")
        if self.strip_rows < 1 or self.strip_rows > self.height_px:
            raise InvalidSpecError("strip_rows must be between 1 and height_px")
        if self.strip_rows > 1 and self.strip_order != "random":
            raise InvalidSpecError("strip_rows > 1 needs strip_order 'random'")
        if not self.policies:
            raise InvalidSpecError("at least one policy is required")
        for p in self.policies:
            if p not in self.cover_by_policy:
                raise InvalidSpecError(f"no cover fraction for policy {p}")
            if p not in self.thermal_offset_by_policy:
                raise InvalidSpecError(f"no thermal offset for policy {p}")
        for p, c in self.cover_by_policy.items():
            if not 0.0 <= c <= 1.0:
                raise InvalidSpecError(f"cover fraction for policy {p} outside [0, 1]")
        for name, spectrum in (("plant", self.plant_spectrum), ("soil", self.soil_spectrum)):
            for b in REFLECTANCE_BANDS:
                if b not in spectrum:
                    raise InvalidSpecError(f"{name} spectrum lacks band {b!r}")
                if not 0.0 <= spectrum[b] <= 1.0:
                    raise InvalidSpecError(f"{name} reflectance for {b} outside [0, 1]")
        if self.texture_amplitude < 0:
            raise InvalidSpecError("texture_amplitude must be non-negative")
        if not self.stripe_detail_scale_px > 0:
            raise InvalidSpecError("stripe_detail_scale_px must be positive")
        sig = self.noise_sigma if isinstance(self.noise_sigma, dict) else {"*": self.noise_sigma}
        if any(v < 0 for v in sig.values()) or self.thermal_noise_sigma < 0:
            raise InvalidSpecError("noise sigmas must be non-negative")
        if not self.dates:
            raise InvalidSpecError("at least one date is required")
        if len(self.date_gains) != len(self.dates) or len(self.registration_offset_px) != len(self.dates):
            raise InvalidSpecError("date_gains and registration_offset_px need one entry per date")
        if any(g <= 0 for g in self.date_gains):
            raise InvalidSpecError("date gains must be positive")
        for d in self.dates:
            try:
                _dt.date.fromisoformat(d)
            except ValueError:
                raise InvalidSpecError(f"bad date {d!r}") from None

    def band_sigma(self, band: str) -> float:
        if band == "thermal":
            return self.thermal_noise_sigma
        if isinstance(self.noise_sigma, dict):
            return float(self.noise_sigma.get(band, 0.0))
        return float(self.noise_sigma)

    def regime_spec(self) -> RegimeSpec:
        if self.layout == "strips":
            if self.strip_order == "random":
                return random_strip_layout(self.width_px, self.height_px, self.policies,
                                           self.n_strips or len(self.policies), self.strip_rows, self.seed)
            return policy_strip_layout(self.width_px, self.height_px, self.policies, self.n_strips)
        return pivot_layout(self.width_px, self.height_px, self.policies, self.pivot_center, self.pivot_radius)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policies"] = list(self.policies)
        d["cover_by_policy"] = {str(k): v for k, v in self.cover_by_policy.items()}
        d["thermal_offset_by_policy"] = {str(k): v for k, v in self.thermal_offset_by_policy.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FieldSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidSpecError(f"unknown field spec keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, InvalidSpecError):
                raise
            raise InvalidSpecError(str(exc)) from None


def random_strip_layout(
    width: int, height: int, policies: Sequence[int], n_strips: int, n_rows: int, seed: int
) -> RegimeSpec:
    """Aperiodic strips: each of ``n_rows`` row bands gets its own seeded policy
    sequence and edge phase, and neighbouring strips never share a policy.
    """
    if n_strips < 1 or n_strips > width:
        raise InvalidSpecError(f"cannot fit {n_strips} strips in width {width}")
    rng = np.random.default_rng([seed, 0x5EED])
    step = width / n_strips
    regions = []
    for r in range(n_rows):
        y0, y1 = round(r * height / n_rows), round((r + 1) * height / n_rows)
        phase = rng.uniform(0.0, step)
        cuts = sorted({0, width} | {round(phase + i * step) for i in range(n_strips)})
        prev = None
        for x0, x1 in zip(cuts[:-1], cuts[1:]):
            choices = [p for p in policies if p != prev] or list(policies)
            prev = int(choices[rng.integers(len(choices))])
            regions.append(RectRegion(prev, x0, y0, x1 - x0, y1 - y0))
    return RegimeSpec(regions, tuple(sorted(set(int(p) for p in policies))))


def value_noise(height: int, width: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth random texture with feature size ``scale`` pixels, roughly in [-1, 1].

    Lattice values drawn uniformly every ``scale`` pixels are joined with a
    cubic (Catmull-Rom) interpolant; ``scale`` <= 1 degenerates to white noise.
    The lattice gets a random sub-cell phase so features do not align with
    any downscaling grid.
    """
    if scale <= 1.0:
        return rng.uniform(-1.0, 1.0, size=(height, width))
    gh = int(np.ceil(height / scale)) + 4
    gw = int(np.ceil(width / scale)) + 4
    lattice = rng.uniform(-1.0, 1.0, size=(gh, gw))
    phase = rng.uniform(0.0, 1.0, size=2)

    def axis(n, off):
        pos = np.arange(n) / scale + off + 1.0
        base = np.floor(pos).astype(np.int64)
        t = pos - base
        t2, t3 = t * t, t * t * t
        w = np.stack([
            -0.5 * t3 + t2 - 0.5 * t,
            1.5 * t3 - 2.5 * t2 + 1.0,
            -1.5 * t3 + 2.0 * t2 + 0.5 * t,
            0.5 * t3 - 0.5 * t2,
        ], axis=-1)
        idx = np.stack([base - 1, base, base + 1, base + 2], axis=-1)
        return idx, w

    iy, wy = axis(height, phase[0])
    ix, wx = axis(width, phase[1])
    rows = (lattice[:, ix] * wx).sum(axis=-1)  # (gh, width)
    return (rows[iy] * wy[:, :, None]).sum(axis=1)


def generate_field(spec: FieldSpec, regimes: RegimeSpec | None = None) -> tuple[BandStack, LabelRaster, RegimeSpec]:
    """On-demand stack at the first date, truth labels and the regime layout.

    ``regimes`` replaces the layout derived from the spec; its policies must
    all have a cover fraction and thermal offset.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    if regimes is None:
        regimes = spec.regime_spec()
    else:
        missing = [p for p in regimes.policies if p not in spec.cover_by_policy or p not in spec.thermal_offset_by_policy]
        if missing:
            raise InvalidSpecError(f"regime policies {missing} have no cover fraction or thermal offset")
    truth = rasterize_regimes(regimes, (spec.width_px, spec.height_px), spec.pixel_size_m)
    h, w = spec.height_px, spec.width_px

    cover = np.zeros((h, w))
    offset = np.zeros((h, w))
    labeled = truth.data >= 0
    for p in regimes.policies:
        sel = truth.data == p
        cover[sel] = spec.cover_by_policy[p]
        offset[sel] = spec.thermal_offset_by_policy[p]
    # unlabeled ground (outside a pivot) is bare soil at the driest offset
    cover[~labeled] = 0.0
    offset[~labeled] = max(spec.thermal_offset_by_policy.values())

    texture = value_noise(h, w, spec.stripe_detail_scale_px, rng)
    f = np.clip(cover + spec.texture_amplitude * texture * labeled, 0.0, 1.0)

    bands = []
    for b in REFLECTANCE_BANDS:
        band_rng = np.random.default_rng([spec.seed, ALL_BANDS.index(b) + 1])
        v = f * spec.plant_spectrum[b] + (1.0 - f) * spec.soil_spectrum[b]
        sigma = spec.band_sigma(b)
        if sigma > 0:
            v = v + band_rng.normal(0.0, sigma, size=v.shape)
        bands.append(v)
    t_rng = np.random.default_rng([spec.seed, ALL_BANDS.index("thermal") + 1])
    thermal = spec.thermal_base_c + offset - spec.thermal_cover_coeff * f
    if spec.thermal_noise_sigma > 0:
        thermal = thermal + t_rng.normal(0.0, spec.thermal_noise_sigma, size=thermal.shape)
    bands.append(thermal)

    stack = BandStack(np.stack(bands), ALL_BANDS, spec.pixel_size_m, spec.dates[0])
    return stack, truth, regimes


def simulate_scheduled(
    on_demand: BandStack,
    factor: int,
    noise_sigma: float = 0.0,
    shift: PixelShift | None = None,
    date_gain: float = 1.0,
    seed: int = 0,
    date: _dt.date | str | None = None,
) -> BandStack:
    """Degrade an on-demand stack into a scheduled-sensor map.

    Applies, in order: additive Gaussian noise, the multiplicative date gain,
    a pixel translation, then area-mean downscaling by ``factor``.
    """
    if factor not in (1, 2, 4, 8, 16):
        raise InvalidSpecError(f"scheduled simulation factor must be one of 1, 2, 4, 8, 16; got {factor}")
    data = on_demand.data.astype(np.float64)
    if noise_sigma > 0:
        data = data + np.random.default_rng(seed).normal(0.0, noise_sigma, size=data.shape)
    if date_gain != 1.0:
        data = data * date_gain
    out = on_demand.with_data(data)
    if shift is not None:
        out = apply_shift(out, shift)
    out = downscale(out, factor)
    if date is not None:
        out = out.with_date(date)
    return out


def simulate_ensemble(
    spec: FieldSpec,
    factor: int,
    scheduled_noise_sigma: float = 0.0,
    bands: Sequence[str] | None = None,
    regimes: RegimeSpec | None = None,
) -> tuple[SensorEnsemble, LabelRaster, RegimeSpec]:
    """Field plus one scheduled map per date (sensor 1) and the on-demand map (sensor 2).

    Date i of the scheduled sensor carries ``date_gains[i]`` and
    ``registration_offset_px[i]`` = (dx, dy).
    """
    on_demand, truth, regimes = generate_field(spec, regimes)
    if bands is not None:
        on_demand = on_demand.select(bands)
    scheduled = []
    for i, (date, gain, (dx, dy)) in enumerate(zip(spec.dates, spec.date_gains, spec.registration_offset_px)):
        shift = PixelShift(float(dx), float(dy)) if (dx or dy) else None
        scheduled.append(
            simulate_scheduled(on_demand, factor, scheduled_noise_sigma, shift, gain, seed=spec.seed * 1000 + i + 7, date=date)
        )
    ensemble = SensorEnsemble(
        [MapSet(1, MapKind.SCHEDULED, scheduled)],
        [MapSet(2, MapKind.ON_DEMAND, [on_demand])],
    )
    return ensemble, truth, regimes
