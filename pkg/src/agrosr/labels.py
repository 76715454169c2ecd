"""Label rasters, irrigation-regime layouts and per-class statistics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import DegenerateInputError, InvalidArgumentError, InvalidSpecError
from .raster import BandStack

UNLABELED = -1
DEFAULT_POLICIES = (0, 60, 100, 120)

IRRIGATED = 0
STRESSED = 1
THERMAL_CLASSES = ((IRRIGATED, "irrigated"), (STRESSED, "stressed/dry"))


@dataclass
class LabelRaster:
    """Per-cell class ids; ``UNLABELED`` (-1) marks cells without a class."""

    data: np.ndarray
    classes: tuple[tuple[int, str], ...]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int32)
        if self.data.ndim != 2:
            raise InvalidArgumentError("label data must be 2D")
        self.classes = tuple((int(i), str(n)) for i, n in self.classes)
        ids = self.class_ids
        if len(set(ids)) != len(ids) or any(i < 0 for i in ids):
            raise InvalidArgumentError(f"class ids must be unique and non-negative, got {ids}")
        present = np.unique(self.data[self.data != UNLABELED])
        unknown = set(present.tolist()) - set(ids)
        if unknown:
            raise InvalidArgumentError(f"label data uses undeclared class ids {sorted(unknown)}")

    @property
    def width_px(self) -> int:
        return self.data.shape[1]

    @property
    def height_px(self) -> int:
        return self.data.shape[0]

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.classes)

    def class_name(self, class_id: int) -> str:
        return dict(self.classes)[class_id]

    def to_index(self) -> np.ndarray:
        """Map class ids to contiguous indices in ascending-id order."""
        ids = sorted(self.class_ids)
        lut = {c: k for k, c in enumerate(ids)}
        out = np.full(self.data.shape, -1, dtype=np.int32)
        for c, k in lut.items():
            out[self.data == c] = k
        return out

    def from_index(self, index_grid: np.ndarray) -> "LabelRaster":
        ids = np.array(sorted(self.class_ids) + [UNLABELED], dtype=np.int32)
        return LabelRaster(ids[np.where(index_grid < 0, len(ids) - 1, index_grid)], self.classes)

    def __eq__(self, other):
        if not isinstance(other, LabelRaster):
            return NotImplemented
        return self.classes == other.classes and np.array_equal(self.data, other.data)


def label_downsample(labels: LabelRaster, factor: int) -> LabelRaster:
    """Block-majority pooling of a label raster.

    Ties go to the lowest class id. A block becomes unlabeled when it holds
    more unlabeled cells than cells of its winning class (so any block more
    than half unlabeled, and also {A, B, unlabeled, unlabeled}). Trailing partial blocks are dropped, as in ``downscale``.
    """
    if factor < 1:
        raise InvalidArgumentError("factor must be >= 1")
    if factor == 1:
        return labels
    idx = _kernels.block_label_majority(labels.to_index(), factor, len(labels.classes))
    return labels.from_index(idx)


# --------------------------------------------------------------------------
# thermal pseudo-labels
# --------------------------------------------------------------------------


def thermal_threshold_labels(
    thermal: BandStack | np.ndarray, threshold_temp: float, morphology_clean: bool = False
) -> LabelRaster:
    """Binary pseudo-irrigation labels from a temperature threshold.

    Cells at or above the threshold are "stressed/dry", cooler cells are
    "irrigated", NaN cells stay unlabeled. ``morphology_clean`` runs one
    3x3 majority pass over labeled cells (ties keep the current label).
    """
    if isinstance(thermal, BandStack):
        grid = thermal.band("thermal") if "thermal" in thermal.band_names else thermal.data[0]
    else:
        grid = np.asarray(thermal)
    grid = np.asarray(grid, dtype=np.float64)
    out = np.full(grid.shape, UNLABELED, dtype=np.int32)
    finite = ~np.isnan(grid)
    out[finite & (grid >= threshold_temp)] = STRESSED
    out[finite & (grid < threshold_temp)] = IRRIGATED
    if morphology_clean:
        out = _kernels.majority3x3(out, 2)
    return LabelRaster(out, THERMAL_CLASSES)


# --------------------------------------------------------------------------
# regime layouts
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RectRegion:
    policy_percent: int
    x0: int
    y0: int
    w: int
    h: int

    def mask(self, height: int, width: int) -> np.ndarray:
        m = np.zeros((height, width), dtype=bool)
        m[self.y0: self.y0 + self.h, self.x0: self.x0 + self.w] = True
        return m

    def within(self, height: int, width: int) -> bool:
        return self.w > 0 and self.h > 0 and self.x0 >= 0 and self.y0 >= 0 and \
            self.x0 + self.w <= width and self.y0 + self.h <= height

    def to_dict(self) -> dict:
        return {"shape": "rect", "policy_percent": self.policy_percent,
                "x0": self.x0, "y0": self.y0, "w": self.w, "h": self.h}


@dataclass(frozen=True)
class SectorRegion:
    """Circular sector; angles in degrees, counter-clockwise from +x, y up.

    A cell belongs to the sector when its center lies within ``radius`` of
    the center and its angle falls in [start_deg, end_deg).
    """

    policy_percent: int
    cx: float
    cy: float
    radius: float
    start_deg: float
    end_deg: float

    def mask(self, height: int, width: int) -> np.ndarray:
        yy, xx = np.mgrid[0:height, 0:width]
        dx = xx + 0.5 - self.cx
        dy = self.cy - (yy + 0.5)
        inside = dx * dx + dy * dy <= self.radius**2
        ang = np.degrees(np.arctan2(dy, dx)) % 360.0
        start = self.start_deg % 360.0
        span = self.end_deg - self.start_deg
        if span >= 360.0:
            return inside
        rel = (ang - start) % 360.0
        return inside & (rel < span)

    def within(self, height: int, width: int) -> bool:
        return self.radius > 0 and self.end_deg > self.start_deg and \
            self.cx - self.radius >= 0 and self.cy - self.radius >= 0 and \
            self.cx + self.radius <= width and self.cy + self.radius <= height

    def to_dict(self) -> dict:
        return {"shape": "sector", "policy_percent": self.policy_percent, "cx": self.cx, "cy": self.cy,
                "radius": self.radius, "start_deg": self.start_deg, "end_deg": self.end_deg}


Region = RectRegion | SectorRegion


@dataclass
class RegimeSpec:
    regions: list[Region] = field(default_factory=list)
    policies: tuple[int, ...] = DEFAULT_POLICIES

    def __post_init__(self):
        self.policies = tuple(sorted(int(p) for p in self.policies))
        if len(set(self.policies)) != len(self.policies):
            raise InvalidSpecError(f"duplicate policies in {self.policies}")
        for r in self.regions:
            if r.policy_percent not in self.policies:
                raise InvalidSpecError(f"region policy {r.policy_percent} not in policy set {self.policies}")

    @property
    def classes(self) -> tuple[tuple[int, str], ...]:
        return tuple((p, str(p)) for p in self.policies)

    def to_dict(self) -> dict:
        return {"policies": list(self.policies), "regions": [r.to_dict() for r in self.regions]}

    @classmethod
    def from_dict(cls, d: dict) -> "RegimeSpec":
        regions = []
        for r in d.get("regions", []):
            r = dict(r)
            shape = r.pop("shape", "rect")
            try:
                if shape == "rect":
                    regions.append(RectRegion(**{k: int(v) for k, v in r.items()}))
                elif shape == "sector":
                    pol = int(r.pop("policy_percent"))
                    regions.append(SectorRegion(pol, **{k: float(v) for k, v in r.items()}))
                else:
                    raise InvalidSpecError(f"unknown region shape {shape!r}")
            except TypeError as exc:
                raise InvalidSpecError(f"bad region record {r}: {exc}") from None
        return cls(regions, tuple(d.get("policies", DEFAULT_POLICIES)))


def rasterize_regimes(spec: RegimeSpec, dims: tuple[int, int], pixel_size_m: float | None = None) -> LabelRaster:
    """Burn regime regions into a label raster of ``dims`` = (width, height).

    ``pixel_size_m`` is accepted for symmetry with the raster it labels; the
    geometry is already in pixel space.
    """
    width, height = dims
    out = np.full((height, width), UNLABELED, dtype=np.int32)
    covered = np.zeros((height, width), dtype=bool)
    for r in spec.regions:
        if not r.within(height, width):
            raise InvalidSpecError(f"region {r} lies outside the {width}x{height} raster")
        m = r.mask(height, width)
        if (m & covered).any():
            raise InvalidSpecError(f"region {r} overlaps an earlier region")
        covered |= m
        out[m] = r.policy_percent
    return LabelRaster(out, spec.classes)


# --------------------------------------------------------------------------
# per-class histograms
# --------------------------------------------------------------------------


@dataclass
class ClassHistogram:
    class_id: int
    name: str
    counts: np.ndarray
    mean: float
    std: float

    @property
    def n(self) -> int:
        return int(self.counts.sum())


@dataclass
class HistogramTable:
    edges: np.ndarray
    classes: list[ClassHistogram]

    def __len__(self):
        return len(self.classes)

    def by_id(self, class_id: int) -> ClassHistogram:
        for c in self.classes:
            if c.class_id == class_id:
                return c
        raise KeyError(class_id)

    def write_csv(self, path: str | Path) -> tuple[Path, Path]:
        """Write ``<path>`` (class, bin_lo, bin_hi, count) and ``<stem>_summary.csv``."""
        path = Path(path)
        summary = path.with_name(path.stem + "_summary.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "bin_lo", "bin_hi", "count"])
            for c in self.classes:
                for lo, hi, n in zip(self.edges[:-1], self.edges[1:], c.counts):
                    w.writerow([c.name, repr(float(lo)), repr(float(hi)), int(n)])
        with open(summary, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "mean", "std"])
            for c in self.classes:
                w.writerow([c.name, repr(c.mean), repr(c.std)])
        return path, summary


def histogram_by_class(values: BandStack | np.ndarray, labels: LabelRaster, bins: int = 32) -> HistogramTable:
    """Histogram a single band per label class over shared bin edges."""
    if bins < 1:
        raise InvalidArgumentError("bins must be positive")
    grid = values.data[0] if isinstance(values, BandStack) else np.asarray(values)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape != labels.data.shape:
        raise InvalidArgumentError(f"value grid {grid.shape} does not match labels {labels.data.shape}")
    finite = ~np.isnan(grid)
    if not finite.any():
        raise DegenerateInputError("value grid has no finite cells")
    usable = finite & (labels.data != UNLABELED)
    if not usable.any():
        return HistogramTable(np.array([]), [])
    lo, hi = float(grid[usable].min()), float(grid[usable].max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    rows = []
    for cid, name in sorted(labels.classes):
        sel = usable & (labels.data == cid)
        if not sel.any():
            continue
        v = grid[sel]
        counts, _ = np.histogram(v, bins=edges)
        rows.append(ClassHistogram(cid, name, counts, float(v.mean()), float(v.std())))
    return HistogramTable(edges, rows)


def class_means(values: np.ndarray, labels: LabelRaster) -> dict[int, float]:
    out = {}
    for cid in labels.class_ids:
        sel = (labels.data == cid) & ~np.isnan(values)
        if sel.any():
            out[cid] = float(np.mean(values[sel], dtype=np.float64))
    return out


def policy_strip_layout(width: int, height: int, policies: Sequence[int], n_strips: int | None = None) -> RegimeSpec:
    """Vertical strips cycling through ``policies`` (default: one strip each)."""
    n = n_strips or len(policies)
    if n < 1 or n > width:
        raise InvalidSpecError(f"cannot fit {n} strips in width {width}")
    edges = [round(i * width / n) for i in range(n + 1)]
    regions = [RectRegion(int(policies[i % len(policies)]), edges[i], 0, edges[i + 1] - edges[i], height)
               for i in range(n)]
    return RegimeSpec(regions, tuple(sorted(set(int(p) for p in policies)) or DEFAULT_POLICIES))


def pivot_layout(width: int, height: int, policies: Sequence[int], center=None, radius=None) -> RegimeSpec:
    """Center-pivot circle split into equal sectors, one per policy."""
    cx, cy = center if center is not None else (width / 2.0, height / 2.0)
    r = radius if radius is not None else min(cx, cy, width - cx, height - cy)
    step = 360.0 / len(policies)
    regions = [SectorRegion(int(p), cx, cy, r, i * step, (i + 1) * step) for i, p in enumerate(policies)]
    return RegimeSpec(regions, tuple(sorted(set(int(p) for p in policies))))

