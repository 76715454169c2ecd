"""Normalized-difference vegetation indices."""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError, MissingBandError
from .raster import BandInfo, BandStack

# index name -> (A, B) for (A - B) / (A + B)
INDEX_BANDS = {
    "NDVI": ("nir", "red"),
    "GNDVI": ("nir", "green"),
    "GRVI": ("green", "red"),
}


def normalized_difference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cellwise (a - b) / (a + b) in float64, clipped to [-1, 1].

    A zero denominator or a NaN input gives NaN. The clip only matters for
    negative reflectances, which noise can produce.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = a + b
    out = np.full(np.broadcast(a, b).shape, np.nan)
    ok = den != 0
    np.divide(a - b, den, out=out, where=ok)
    return np.clip(out, -1.0, 1.0)


def required_bands(index: str) -> tuple[str, str]:
    try:
        return INDEX_BANDS[index.upper()]
    except KeyError:
        raise InvalidArgumentError(f"unknown index {index!r}; choose from {sorted(INDEX_BANDS)}") from None


def compute_index(stack: BandStack, index: str) -> BandStack:
    a_name, b_name = required_bands(index)
    for name in (a_name, b_name):
        if name not in stack.band_names:
            raise MissingBandError(name)
    values = normalized_difference(stack.band(a_name), stack.band(b_name))
    return stack.with_data(values[None], [BandInfo(index.lower(), None, "index")])


def index_grid(stack: BandStack, index: str) -> np.ndarray:
    """Like ``compute_index`` but returns the bare float64 grid."""
    a_name, b_name = required_bands(index)
    return normalized_difference(stack.band(a_name), stack.band(b_name))
