"""SR task definition and paired low/high-resolution patch extraction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import _kernels
from ..errors import EmptyDatasetError, InvalidArgumentError, MissingBandError, ResolutionMismatchError
from ..raster import BandStack, SensorEnsemble

DEFAULT_FACTORS = (1, 2, 4, 8)


@dataclass(frozen=True)
class SRTaskSpec:
    input_bands: tuple[str, ...]
    target_bands: tuple[str, ...]
    scale_factor: int = 2
    patch_size_lo: int = 5
    stride: int = 2
    allowed_factors: tuple[int, ...] = DEFAULT_FACTORS

    def __post_init__(self):
        object.__setattr__(self, "input_bands", tuple(self.input_bands))
        object.__setattr__(self, "target_bands", tuple(self.target_bands))
        object.__setattr__(self, "allowed_factors", tuple(int(f) for f in self.allowed_factors))
        if not self.input_bands or not self.target_bands:
            raise InvalidArgumentError("input and target band lists must be non-empty")
        if self.scale_factor not in self.allowed_factors:
            raise InvalidArgumentError(f"scale_factor {self.scale_factor} not in {self.allowed_factors}")
        if self.patch_size_lo < 1 or self.patch_size_lo % 2 == 0:
            raise InvalidArgumentError(f"patch_size_lo must be an odd positive integer, got {self.patch_size_lo}")
        if self.stride < 1:
            raise InvalidArgumentError("stride must be positive")

    @property
    def patch_size_hi(self) -> int:
        return self.patch_size_lo * self.scale_factor

    def to_dict(self) -> dict:
        return {
            "input_bands": list(self.input_bands),
            "target_bands": list(self.target_bands),
            "scale_factor": self.scale_factor,
            "patch_size_lo": self.patch_size_lo,
            "stride": self.stride,
            "allowed_factors": list(self.allowed_factors),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SRTaskSpec":
        return cls(**d)


@dataclass
class PairDataset:
    """Paired patches: ``lo`` is (n, C_in, p, p), ``hi`` is (n, C_out, p*f, p*f)."""

    task: SRTaskSpec
    lo: np.ndarray
    hi: np.ndarray
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __len__(self):
        return self.lo.shape[0]

    def subset(self, idx) -> "PairDataset":
        return PairDataset(self.task, self.lo[idx], self.hi[idx], self.positions[idx])

    def concat(self, other: "PairDataset") -> "PairDataset":
        return PairDataset(
            self.task,
            np.concatenate([self.lo, other.lo]),
            np.concatenate([self.hi, other.hi]),
            np.concatenate([self.positions, other.positions]),
        )


def check_ratio(lo: BandStack, hi: BandStack, factor: int) -> None:
    ratio = lo.pixel_size_m / hi.pixel_size_m
    if abs(ratio - factor) > 1e-6 * factor:
        raise ResolutionMismatchError(
            f"scheduled/on-demand pixel ratio is {ratio:.6g}, task expects {factor}",
            (hi.pixel_size_m * factor,),
        )


def _band_array(stack: BandStack, names) -> np.ndarray:
    for n in names:
        if n not in stack.band_names:
            raise MissingBandError(n)
    return stack.select(names).data.astype(np.float64)


def pairs_from_stacks(
    lo: BandStack,
    hi: BandStack,
    task: SRTaskSpec,
    lo_mask: np.ndarray | None = None,
    seed: int | None = None,
) -> PairDataset:
    """Cut co-registered patch pairs on the stride grid.

    ``lo_mask`` (lo resolution) restricts pairs to patches lying wholly inside
    it. Pairs with any NaN on either side are skipped. Order is raster order,
    shuffled when ``seed`` is given.
    """
    f = task.scale_factor
    check_ratio(lo, hi, f)
    if lo.height_px * f > hi.height_px or lo.width_px * f > hi.width_px:
        raise InvalidArgumentError(
            f"scheduled extent {lo.width_px}x{lo.height_px} x{f} exceeds on-demand {hi.width_px}x{hi.height_px}"
        )
    p = task.patch_size_lo
    if p > lo.height_px or p > lo.width_px:
        raise EmptyDatasetError(f"patch size {p} exceeds scheduled raster {lo.width_px}x{lo.height_px}")
    lo_arr = _band_array(lo, task.input_bands)
    hi_arr = _band_array(hi, task.target_bands)[:, : lo.height_px * f, : lo.width_px * f]

    ys = np.arange(0, lo.height_px - p + 1, task.stride)
    xs = np.arange(0, lo.width_px - p + 1, task.stride)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    pos = np.stack([yy.ravel(), xx.ravel()], axis=1)

    lo_win = _kernels.patch_windows(lo_arr, p)[pos[:, 0], pos[:, 1]]
    hi_win = _kernels.patch_windows(hi_arr, p * f)[pos[:, 0] * f, pos[:, 1] * f]
    ok = ~np.isnan(lo_win).any(axis=(1, 2, 3)) & ~np.isnan(hi_win).any(axis=(1, 2, 3))
    if lo_mask is not None:
        inside = _kernels.patch_windows(np.asarray(lo_mask, dtype=np.float64)[None], p)[pos[:, 0], pos[:, 1]]
        ok &= inside.min(axis=(1, 2, 3)) > 0
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        raise EmptyDatasetError("no usable SR patch pairs")
    if seed is not None:
        idx = np.random.default_rng(seed).permutation(idx)
    return PairDataset(task, np.ascontiguousarray(lo_win[idx]), np.ascontiguousarray(hi_win[idx]), pos[idx])


def _pair_maps(ensemble: SensorEnsemble) -> list[tuple[BandStack, BandStack]]:
    scheduled = ensemble.scheduled_maps()
    on_demand = ensemble.on_demand_maps()
    if not scheduled or not on_demand:
        raise InvalidArgumentError("ensemble needs both scheduled and on-demand maps")
    out = []
    for lo in scheduled:
        same = [hi for hi in on_demand if hi.acquisition_date == lo.acquisition_date]
        if same:
            hi = same[0]
        else:
            hi = min(on_demand, key=lambda m: abs((m.acquisition_date - lo.acquisition_date).days))
        out.append((lo, hi))
    return out


def make_training_pairs(
    ensemble: SensorEnsemble, task: SRTaskSpec, seed: int | None = None, lo_mask: np.ndarray | None = None
) -> PairDataset:
    """Pairs from every scheduled map and its same-date (else nearest-date) on-demand map."""
    data = None
    for lo, hi in _pair_maps(ensemble):
        try:
            part = pairs_from_stacks(lo, hi, task, lo_mask)
        except EmptyDatasetError:
            continue
        data = part if data is None else data.concat(part)
    if data is None:
        raise EmptyDatasetError("no usable SR patch pairs in ensemble")
    if seed is not None:
        data = data.subset(np.random.default_rng(seed).permutation(len(data)))
    return data
