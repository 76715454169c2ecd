"""Image similarity: MSE, PSNR and SSIM over finite cells."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DegenerateInputError, InvalidArgumentError
from ..raster import BandStack

SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class SimilarityReport:
    mse: float
    psnr_db: float  # math.inf when mse == 0
    ssim: float
    data_range: float
    per_band: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def fmt(v):
            return "inf" if v == np.inf else float(v)

        return {
            "mse": float(self.mse),
            "psnr_db": fmt(self.psnr_db),
            "ssim": float(self.ssim),
            "data_range": float(self.data_range),
            "per_band": {k: {kk: fmt(vv) for kk, vv in v.items()} for k, v in self.per_band.items()},
        }


def psnr_from_mse(mse: float, data_range: float) -> float:
    if mse == 0:
        return np.inf
    return float(10.0 * np.log10(data_range ** 2 / mse))


def ssim_grid(x: np.ndarray, y: np.ndarray, data_range: float, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all fully-finite window positions (uniform weights, stride 1)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    win = min(window, x.shape[0], x.shape[1])
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    wx = sliding_window_view(x, (win, win))
    wy = sliding_window_view(y, (win, win))
    ok = np.isfinite(wx).all(axis=(2, 3)) & np.isfinite(wy).all(axis=(2, 3))
    if not ok.any():
        raise DegenerateInputError("no fully finite SSIM window")
    wx, wy = wx[ok], wy[ok]
    mx = wx.mean(axis=(1, 2))
    my = wy.mean(axis=(1, 2))
    dx = wx - mx[:, None, None]
    dy = wy - my[:, None, None]
    n = win * win
    # unbiased window statistics, as in the reference formulation
    vx = (dx * dx).sum(axis=(1, 2)) / (n - 1 if n > 1 else 1)
    vy = (dy * dy).sum(axis=(1, 2)) / (n - 1 if n > 1 else 1)
    cxy = (dx * dy).sum(axis=(1, 2)) / (n - 1 if n > 1 else 1)
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.clip((num / den).mean(), -1.0, 1.0))


def similarity(predicted: BandStack, reference: BandStack, data_range: float = 1.0) -> SimilarityReport:
    if not data_range > 0:
        raise InvalidArgumentError("data_range must be positive")
    if predicted.data.shape != reference.data.shape:
        raise InvalidArgumentError(f"shape mismatch {predicted.data.shape} vs {reference.data.shape}")
    if predicted.band_names != reference.band_names:
        raise InvalidArgumentError(f"band mismatch {predicted.band_names} vs {reference.band_names}")
    p = predicted.data.astype(np.float64)
    r = reference.data.astype(np.float64)
    finite = np.isfinite(p) & np.isfinite(r)
    if not finite.any():
        raise DegenerateInputError("no overlapping finite cells")
    diff2 = np.where(finite, (p - r) ** 2, 0.0)
    mse = float(diff2.sum() / finite.sum())
    per_band = {}
    ssims = []
    for i, name in enumerate(predicted.band_names):
        fb = finite[i]
        if not fb.any():
            continue
        b_mse = float(diff2[i].sum() / fb.sum())
        try:
            b_ssim = ssim_grid(np.where(fb, p[i], np.nan), np.where(fb, r[i], np.nan), data_range)
        except DegenerateInputError:
            b_ssim = np.nan
        per_band[name] = {"mse": b_mse, "psnr_db": psnr_from_mse(b_mse, data_range), "ssim": b_ssim}
        if np.isfinite(b_ssim):
            ssims.append(b_ssim)
    ssim = float(np.mean(ssims)) if ssims else float("nan")
    return SimilarityReport(mse, psnr_from_mse(mse, data_range), ssim, float(data_range), per_band)
