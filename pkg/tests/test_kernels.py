"""Both kernel backends against the loop oracles and against each other."""

import os
import subprocess
import sys

import numpy as np
import pytest

from agrosr import _kernels
from oracles import block_majority, block_mean, knn_brute, ncc_shift

BACKENDS = ["numpy"] + (["numba"] if _kernels.NUMBA is not None else [])


@pytest.fixture(params=BACKENDS)
def kb(request):
    return _kernels.backend(request.param)


def test_backend_lookup():
    assert _kernels.backend("numpy").name == "numpy"
    assert _kernels.backend() is _kernels.ACTIVE
    with pytest.raises(ValueError):
        _kernels.backend("cuda")


def test_env_flag_selects_numpy():
    code = "from agrosr import _kernels; print(_kernels.ACTIVE.name)"
    env = dict(os.environ, AGROSR_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_block_nanmean(kb, rng):
    for factor in (1, 2, 3, 4, 8):
        a = rng.random((8 * 3 + 1, 8 * 2 + 3)).astype(np.float32)
        a[rng.random(a.shape) < 0.2] = np.nan
        a[:factor, :factor] = np.nan
        got = kb.block_nanmean(a, factor)
        ref = block_mean(a, factor).astype(np.float32)
        assert np.array_equal(got, ref, equal_nan=True)


def test_ncc_search(kb, rng):
    for _ in range(4):
        ref = rng.normal(size=(24, 20))
        mov = np.roll(ref, tuple(rng.integers(-3, 4, 2)), axis=(0, 1)) + 0.3 * rng.normal(size=ref.shape)
        dy, dx, c = kb.ncc_search(ref, mov, 4)
        ody, odx, oc = ncc_shift(ref, mov, 4)
        assert (dy, dx) == (ody, odx)
        assert c == pytest.approx(oc, abs=1e-9)


def test_block_label_majority(kb, rng):
    for factor in (2, 3, 4):
        labels = rng.integers(-1, 3, size=(factor * 5, factor * 4)).astype(np.int32)
        assert np.array_equal(kb.block_label_majority(labels, factor, 3), block_majority(labels, factor, 3))


def test_block_label_majority_examples(kb):
    # {A, A, B, unlabeled} -> A; {A, B, unlabeled, unlabeled} -> unlabeled
    labels = np.array([[0, 0, 0, 1], [1, -1, -1, -1]], dtype=np.int32)
    assert kb.block_label_majority(labels, 2, 2).tolist() == [[0, -1]]


def _majority_oracle(labels, n_classes):
    h, w = labels.shape
    out = labels.copy()
    for y in range(h):
        for x in range(w):
            if labels[y, x] < 0:
                continue
            counts = [0] * n_classes
            for yy in range(max(0, y - 1), min(h, y + 2)):
                for xx in range(max(0, x - 1), min(w, x + 2)):
                    if labels[yy, xx] >= 0:
                        counts[labels[yy, xx]] += 1
            best = max(counts)
            if counts[labels[y, x]] != best:
                out[y, x] = counts.index(best)
    return out


def test_majority3x3(kb, rng):
    labels = rng.integers(-1, 3, size=(17, 13)).astype(np.int32)
    assert np.array_equal(kb.majority3x3(labels, 3), _majority_oracle(labels, 3))


def test_knn_with_ties(kb, rng):
    # integer-valued features force many exact distance ties
    for k in (1, 3, 5):
        x = rng.integers(0, 3, size=(60, 3)).astype(np.float64)
        y = rng.integers(0, 3, size=60).astype(np.int32)
        order = np.argsort(y, kind="stable")
        x, y = x[order], y[order]
        q = rng.integers(0, 3, size=(40, 3)).astype(np.float64)
        assert np.array_equal(kb.knn_predict(x, y, q, k, 3), knn_brute(x, y, q, k, 3))


def test_knn_k_exceeds_training_size(kb):
    x = np.array([[0.0], [1.0]])
    y = np.array([0, 1], dtype=np.int32)
    assert kb.knn_predict(x, y, np.array([[5.0]]), 7, 2).tolist() == [0]


def test_overlap_add(kb, rng):
    patches = rng.random((6, 2, 4, 4))
    pos = rng.integers(0, 3, size=(6, 2))
    acc, cnt = kb.overlap_add(patches, pos, (10, 10), 2)
    ref_acc = np.zeros((2, 10, 10))
    ref_cnt = np.zeros((10, 10))
    for p, (y, x) in zip(patches, pos):
        ref_acc[:, 2 * y: 2 * y + 4, 2 * x: 2 * x + 4] += p
        ref_cnt[2 * y: 2 * y + 4, 2 * x: 2 * x + 4] += 1
    assert np.allclose(acc, ref_acc, atol=1e-12)
    assert np.array_equal(cnt, ref_cnt)


@pytest.mark.skipif(_kernels.NUMBA is None, reason="numba not installed")
def test_backends_agree_on_larger_inputs(rng):
    nb, npk = _kernels.backend("numba"), _kernels.backend("numpy")
    a = rng.random((130, 96)).astype(np.float32)
    assert np.array_equal(nb.block_nanmean(a, 4), npk.block_nanmean(a, 4))
    x = np.round(rng.normal(size=(500, 6)), 1)
    y = np.sort(rng.integers(0, 4, 500)).astype(np.int32)
    q = np.round(rng.normal(size=(300, 6)), 1)
    assert np.array_equal(nb.knn_predict(x, y, q, 5, 4), npk.knn_predict(x, y, q, 5, 4))
    ref = rng.normal(size=(64, 64))
    assert nb.ncc_search(ref, np.roll(ref, 2, axis=1), 6)[:2] == npk.ncc_search(ref, np.roll(ref, 2, axis=1), 6)[:2]


def test_patch_windows_shape():
    g = np.arange(2 * 5 * 6, dtype=float).reshape(2, 5, 6)
    win = _kernels.patch_windows(g, 3)
    assert win.shape == (3, 4, 2, 3, 3)
    assert np.array_equal(win[1, 2], g[:, 1:4, 2:5])
