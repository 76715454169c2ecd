"""Pre-flight checklist: is SR on scheduled imagery even plausible here?"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import AgroSRError, InvalidArgumentError
from .raster import BandStack, SensorEnsemble, crop, estimate_shift, resample_to_resolution

PASS, WARN, FAIL = "pass", "warn", "fail"
INSUFFICIENT = "warn: insufficient data"

# median of a chi-square(1) variable; scales the median squared residual to a variance
_CHI2_1_MEDIAN = 0.4549364231195724
# variance of x - mean3x3(x) for white noise, relative to the noise variance
_RESIDUAL_GAIN = 8.0 / 9.0
HIST_BINS = 32
WHITE_REF_BAND = "white_ref"


@dataclass
class AuditThresholds:
    min_feature_ratio: float = 1.0
    max_gap: float = 16.0
    min_snr_db: float = 10.0
    max_registration_px: float = 2.0
    max_drift: float = 0.1
    registration_band: str | None = None
    search_px: int = 8

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AuditThresholds":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown audit threshold keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ChecklistReport:
    items: dict = field(default_factory=dict)  # item1..item5 -> {value, threshold, verdict, ...}

    @property
    def verdicts(self) -> dict:
        return {k: v["verdict"] for k, v in self.items.items()}

    @property
    def overall(self) -> str:
        vs = self.verdicts.values()
        if any(v == FAIL for v in vs):
            return FAIL
        if any(v.startswith(WARN) for v in vs):
            return WARN
        return PASS

    def to_dict(self) -> dict:
        return dict(self.items)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def summary_line(self) -> str:
        parts = []
        for key in sorted(self.items):
            it = self.items[key]
            v = it["value"]
            shown = "n/a" if v is None else (f"{v:.3g}" if isinstance(v, (int, float)) else str(v))
            parts.append(f"{key}={shown} [{it['verdict']}]")
        return f"audit {self.overall.upper()}: " + "; ".join(parts)


def noise_variance(grid: np.ndarray) -> float:
    """Robust white-noise variance from the 3x3 local-mean residual.

    For white noise the residual x - mean3x3(x) has variance 8/9 of the noise
    variance, and the median of its square is 0.4549 times that. Only
    windows without NaN contribute.
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.shape[0] < 3 or g.shape[1] < 3:
        return float("nan")
    win = sliding_window_view(g, (3, 3))
    mean = win.mean(axis=(2, 3))
    resid = g[1:-1, 1:-1] - mean
    resid = resid[np.isfinite(resid)]
    if resid.size == 0:
        return float("nan")
    return float(np.median(resid * resid) / (_CHI2_1_MEDIAN * _RESIDUAL_GAIN))


def band_snr_db(stack: BandStack) -> dict:
    """Per-band SNR: total variance over estimated noise variance, in dB.

    A band named ``white_ref`` (a flat calibration target) supplies the noise
    variance for every other band when present.
    """
    ref_noise = None
    if WHITE_REF_BAND in stack.band_names:
        ref = stack.band(WHITE_REF_BAND).astype(np.float64)
        ref_noise = float(np.nanvar(ref))
    out = {}
    for name in stack.band_names:
        if name == WHITE_REF_BAND:
            continue
        g = stack.band(name).astype(np.float64)
        total = float(np.nanvar(g))
        noise = ref_noise if ref_noise is not None else noise_variance(g)
        if not np.isfinite(noise) or not np.isfinite(total):
            out[name] = float("nan")
        elif noise <= 0:
            out[name] = float("inf") if total > 0 else float("nan")
        elif total <= 0:
            out[name] = float("-inf")
        else:
            out[name] = float(10.0 * np.log10(total / noise))
    return out


def histogram_l1(a: np.ndarray, b: np.ndarray, bins: int = HIST_BINS) -> float:
    """L1 distance between normalized histograms on shared edges (0..2)."""
    a = a[np.isfinite(a)]
    b = b[np.isfinite(b)]
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi == lo:
        hi, lo = hi + 0.5, lo - 0.5
    edges = np.linspace(lo, hi, bins + 1)
    pa = np.histogram(a, edges)[0] / a.size
    pb = np.histogram(b, edges)[0] / b.size
    return float(np.abs(pa - pb).sum())


def _item(value, threshold, verdict, **extra) -> dict:
    d = {"value": value, "threshold": threshold, "verdict": verdict}
    d.update(extra)
    return d


def _registration_band(lo: BandStack, hi: BandStack, wanted: str | None) -> str | None:
    common = [b for b in lo.band_names if b in hi.band_names and b != WHITE_REF_BAND]
    if wanted is not None:
        return wanted if wanted in common else None
    for pref in ("nir", "red", "green"):
        if pref in common:
            return pref
    return common[0] if common else None


def audit(ensemble: SensorEnsemble, feature_size_m: float, thresholds: AuditThresholds | None = None) -> ChecklistReport:
    th = thresholds or AuditThresholds()
    if not (isinstance(feature_size_m, (int, float)) and feature_size_m > 0 and np.isfinite(feature_size_m)):
        raise InvalidArgumentError(f"feature_size_m must be a positive real, got {feature_size_m!r}")
    scheduled = ensemble.scheduled_maps()
    if not scheduled:
        raise InvalidArgumentError("audit needs at least one scheduled map")
    on_demand = ensemble.on_demand_maps()
    sched_px = max(m.pixel_size_m for m in scheduled)
    items = {}

    ratio = feature_size_m / sched_px
    items["item1"] = _item(ratio, th.min_feature_ratio, PASS if ratio >= th.min_feature_ratio else FAIL,
                           feature_size_m=feature_size_m, scheduled_pixel_m=sched_px)

    if on_demand:
        gap = sched_px / min(m.pixel_size_m for m in on_demand)
        items["item2"] = _item(gap, th.max_gap, PASS if gap <= th.max_gap else WARN)
    else:
        items["item2"] = _item(None, th.max_gap, INSUFFICIENT)

    ref = scheduled[0]
    snr = band_snr_db(ref)
    finite = [v for v in snr.values() if not np.isnan(v)]
    worst = min(finite) if finite else None
    if worst is None:
        items["item3"] = _item(None, th.min_snr_db, INSUFFICIENT, per_band=snr)
    else:
        items["item3"] = _item(worst, th.min_snr_db, PASS if worst >= th.min_snr_db else FAIL, per_band=snr)

    items["item4"] = _registration_item(scheduled, on_demand, th)
    items["item5"] = _drift_item(ensemble, th)
    return ChecklistReport(items)


def _registration_item(scheduled, on_demand, th: AuditThresholds) -> dict:
    if not on_demand:
        return _item(None, th.max_registration_px, INSUFFICIENT)
    lo = scheduled[0]
    hi = min(on_demand, key=lambda m: abs((m.acquisition_date - lo.acquisition_date).days))
    band = _registration_band(lo, hi, th.registration_band)
    if band is None:
        return _item(None, th.max_registration_px, INSUFFICIENT)
    try:
        coarse = resample_to_resolution(hi.select([band]), lo.pixel_size_m)
        h = min(coarse.height_px, lo.height_px)
        w = min(coarse.width_px, lo.width_px)
        a = crop(coarse, 0, 0, w, h).band(band)
        b = crop(lo.select([band]), 0, 0, w, h).band(band)
        shift = estimate_shift(a, b, th.search_px)
    except AgroSRError as exc:
        return _item(None, th.max_registration_px, INSUFFICIENT, reason=str(exc))
    mag = shift.magnitude
    return _item(mag, th.max_registration_px, PASS if mag <= th.max_registration_px else FAIL,
                 dx_px=shift.dx_px, dy_px=shift.dy_px, confidence=shift.confidence, band=band)


def _drift_item(ensemble: SensorEnsemble, th: AuditThresholds) -> dict:
    per_band_shift: dict = {}
    per_band_hist: dict = {}
    for ms in ensemble.scheduled_sets:
        maps = sorted(ms.maps, key=lambda m: m.acquisition_date)
        if len(maps) < 2:
            continue
        first = maps[0]
        for other in maps[1:]:
            for name in first.band_names:
                if name not in other.band_names:
                    continue
                a = first.band(name).astype(np.float64)
                b = other.band(name).astype(np.float64)
                m0 = float(np.nanmean(a))
                m1 = float(np.nanmean(b))
                rel = abs(m1 - m0) / abs(m0) if m0 != 0 else (0.0 if m1 == 0 else float("inf"))
                key = f"{ms.sensor_id}:{name}"
                per_band_shift[key] = max(per_band_shift.get(key, 0.0), rel)
                per_band_hist[key] = max(per_band_hist.get(key, 0.0), histogram_l1(a, b))
    if not per_band_shift:
        return _item(None, th.max_drift, INSUFFICIENT)
    worst = max(per_band_shift.values())
    return _item(worst, th.max_drift, PASS if worst <= th.max_drift else FAIL,
                 relative_mean_shift=per_band_shift, histogram_l1=per_band_hist)
