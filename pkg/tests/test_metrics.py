import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from agrosr.errors import DegenerateInputError
from agrosr.raster import BandStack
from agrosr.sr import psnr_from_mse, similarity, ssim_grid
from oracles import psnr


def _stack(a, bands=("red",)):
    return BandStack(np.asarray(a, dtype=np.float64).reshape((len(bands),) + np.shape(a)[-2:]), bands, 1.0)


def test_identical_stacks(rng):
    s = _stack(rng.random((2, 20, 20)), ("red", "nir"))
    rep = similarity(s, s, 1.0)
    assert rep.mse == 0 and rep.psnr_db == math.inf and rep.ssim == 1.0
    assert rep.to_dict()["psnr_db"] == "inf"


def test_constant_zero_vs_one():
    rep = similarity(_stack(np.zeros((16, 16))), _stack(np.ones((16, 16))), 1.0)
    assert rep.mse == 1.0 and rep.psnr_db == 0.0


def test_gaussian_noise_mse():
    rng = np.random.default_rng(0)
    ref = rng.random((256, 256))
    for sigma in (0.01, 0.05, 0.1):
        pred = ref + rng.normal(0, sigma, ref.shape)
        rep = similarity(_stack(pred), _stack(ref), 1.0)
        # float32 storage adds ~1e-8 absolute error, irrelevant at these sigmas
        assert rep.mse == pytest.approx(sigma ** 2, rel=0.05)
        assert rep.psnr_db == pytest.approx(psnr(rep.mse, 1.0), abs=1e-9)


def test_nan_cells_are_ignored(rng):
    a = rng.random((12, 12))
    b = a.copy()
    b[:3] = np.nan
    b[5, 5] = 7.0
    rep = similarity(_stack(a), _stack(b), 1.0)
    assert rep.mse == pytest.approx((7.0 - np.float32(a[5, 5])) ** 2 / (9 * 12), rel=1e-6)


def test_no_overlap_is_degenerate():
    with pytest.raises(DegenerateInputError):
        similarity(_stack(np.full((4, 4), np.nan)), _stack(np.ones((4, 4))), 1.0)


def test_shape_or_band_mismatch(rng):
    with pytest.raises(ValueError):
        similarity(_stack(rng.random((4, 4))), _stack(rng.random((4, 5))))
    with pytest.raises(ValueError):
        similarity(_stack(rng.random((4, 4))), _stack(rng.random((4, 4)), ("nir",)))


def test_psnr_sentinel_and_formula():
    assert psnr_from_mse(0.0, 1.0) == math.inf
    assert psnr_from_mse(0.01, 1.0) == pytest.approx(20.0)
    assert psnr_from_mse(1.0, 255.0) == pytest.approx(20 * math.log10(255))


grids = arrays(np.float64, (10, 10), elements=st.floats(0, 1))


@given(grids, grids)
def test_symmetry_and_ssim_bounds(a, b):
    ab = similarity(_stack(a), _stack(b), 1.0)
    ba = similarity(_stack(b), _stack(a), 1.0)
    assert ab.mse == ba.mse and ab.psnr_db == ba.psnr_db
    assert -1.0 <= ab.ssim <= 1.0
    assert ssim_grid(a, a, 1.0) == 1.0
