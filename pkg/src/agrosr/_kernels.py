"""Hot inner loops, each in a numba and a pure-numpy flavour.

The numba versions are used when numba imports and the environment variable
``AGROSR_DISABLE_NUMBA`` is unset (or "0"). Both flavours produce the same
results; the test-suite checks parity and ``benchmarks/bench_kernels.py``
times them against each other.

Conventions shared by all kernels:

* label grids are int32 with ``-1`` for unlabeled and contiguous class
  indices ``0..n_classes-1`` otherwise;
* a pooled block is unlabeled when it holds more unlabeled cells than cells
  of its most frequent class;
* every tie resolves to the lowest class index.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

DISABLED = os.environ.get("AGROSR_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")

_TIE_TOL = 1e-12


# --------------------------------------------------------------------------
# numpy flavour
# --------------------------------------------------------------------------


def _np_block_nanmean(a, factor):
    h = a.shape[0] // factor
    w = a.shape[1] // factor
    blocks = a[: h * factor, : w * factor].astype(np.float64)
    blocks = blocks.reshape(h, factor, w, factor)
    finite = ~np.isnan(blocks)
    total = np.where(finite, blocks, 0.0).sum(axis=(1, 3))
    count = finite.sum(axis=(1, 3))
    out = np.full((h, w), np.nan, dtype=np.float64)
    np.divide(total, count, out=out, where=count > 0)
    return out.astype(np.float32)


def _pearson_np(r, m):
    r = r - r.mean()
    m = m - m.mean()
    den = np.sqrt((r * r).sum() * (m * m).sum())
    if den <= 0.0:
        return 0.0
    return float((r * m).sum() / den)


def _np_ncc_search(ref, mov, search):
    h, w = ref.shape
    best = -2.0
    best_dy = 0
    best_dx = 0
    for dy in range(-search, search + 1):
        for dx in range(-search, search + 1):
            # mov[y, x] pairs with ref[y - dy, x - dx]
            m = mov[max(0, dy): h + min(0, dy), max(0, dx): w + min(0, dx)]
            r = ref[max(0, -dy): h - max(0, dy), max(0, -dx): w - max(0, dx)]
            c = _pearson_np(r, m)
            if c > best + _TIE_TOL or (
                c > best - _TIE_TOL and dy * dy + dx * dx < best_dy * best_dy + best_dx * best_dx
            ):
                best = c
                best_dy = dy
                best_dx = dx
    return best_dy, best_dx, best


def _class_counts_3x3(labels, n_classes):
    h, w = labels.shape
    padded = np.pad(labels, 1, constant_values=-1)
    counts = np.zeros((n_classes, h, w), dtype=np.int32)
    for oy in range(3):
        for ox in range(3):
            win = padded[oy: oy + h, ox: ox + w]
            for c in range(n_classes):
                counts[c] += win == c
    return counts


def _np_majority3x3(labels, n_classes):
    out = labels.copy()
    if n_classes == 0:
        return out
    counts = _class_counts_3x3(labels, n_classes)
    best = counts.max(axis=0)
    winner = counts.argmax(axis=0).astype(np.int32)
    labeled = labels >= 0
    current = np.where(labeled, labels, 0)
    keep = np.take_along_axis(counts, current[None], axis=0)[0] == best
    out[labeled] = np.where(keep, labels, winner)[labeled]
    return out


def _np_block_label_majority(labels, factor, n_classes):
    h = labels.shape[0] // factor
    w = labels.shape[1] // factor
    blocks = labels[: h * factor, : w * factor].reshape(h, factor, w, factor)
    unlabeled = (blocks < 0).sum(axis=(1, 3))
    out = np.full((h, w), -1, dtype=np.int32)
    if n_classes > 0:
        counts = np.stack([(blocks == c).sum(axis=(1, 3)) for c in range(n_classes)])
        out = counts.argmax(axis=0).astype(np.int32)
        out[unlabeled > counts.max(axis=0)] = -1
    return out


def _knn_candidates(train_x, test_x, k, sq_train):
    """Candidate rows for exact reranking, padded with -1, ascending per row.

    Every row whose expanded (BLAS) distance is within a rounding tolerance
    of the k-th smallest is kept, so exact ties are never lost.
    """
    n = train_x.shape[0]
    if k >= n:
        return np.tile(np.arange(n), (test_x.shape[0], 1))
    sq_test = np.einsum("ij,ij->i", test_x, test_x)
    approx = sq_train[None, :] - 2.0 * test_x @ train_x.T
    kth = np.partition(approx, k - 1, axis=1)[:, k - 1]
    tol = 1e-9 * (sq_train.max() + sq_test + 1.0)
    rows, cols = np.nonzero(approx <= (kth + tol)[:, None])
    counts = np.bincount(rows, minlength=test_x.shape[0])
    cand = np.full((test_x.shape[0], counts.max()), -1, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    cand[rows, np.arange(rows.size) - starts[rows]] = cols
    return cand


def _np_knn_rerank(train_x, train_y, test_x, cand, k, n_classes):
    pad = cand < 0
    cand = np.where(pad, 0, cand)
    # accumulate dimension by dimension, the same order as the compiled loop,
    # so near-ties round identically in both backends
    exact = np.zeros(cand.shape)
    for j in range(train_x.shape[1]):
        diff = train_x[cand, j] - test_x[:, j, None]
        exact += diff * diff
    exact[pad] = np.inf
    # stable sort over ascending candidate indices: equal distances keep the
    # lower row, and rows are sorted by class, so ties go to the lowest class
    order = np.argsort(exact, axis=1, kind="stable")[:, :k]
    nbr = np.take_along_axis(cand, order, axis=1)
    votes = np.zeros((len(test_x), n_classes), dtype=np.int64)
    np.add.at(votes, (np.repeat(np.arange(len(test_x)), k), train_y[nbr].ravel()), 1)
    return votes.argmax(axis=1).astype(np.int32)


def _knn_driver(rerank, train_x, train_y, test_x, k, n_classes):
    n = train_x.shape[0]
    k = min(k, n)
    sq_train = np.einsum("ij,ij->i", train_x, train_x)
    out = np.empty(test_x.shape[0], dtype=np.int32)
    chunk = max(1, 2_000_000 // max(n, 1))
    for start in range(0, test_x.shape[0], chunk):
        block = test_x[start: start + chunk]
        cand = _knn_candidates(train_x, block, k, sq_train)
        out[start: start + len(block)] = rerank(train_x, train_y, block, cand, k, n_classes)
    return out


def _np_knn_predict(train_x, train_y, test_x, k, n_classes):
    # train rows must be stably sorted by class (see Classifier training)
    return _knn_driver(_np_knn_rerank, train_x, train_y, test_x, k, n_classes)


def _np_overlap_add(patches, positions, out_shape, scale):
    """Sum patches (n, c, ph, pw) into a (c, H, W) canvas at positions*scale."""
    c = patches.shape[1]
    ph, pw = patches.shape[2], patches.shape[3]
    acc = np.zeros((c,) + tuple(out_shape), dtype=np.float64)
    cnt = np.zeros(tuple(out_shape), dtype=np.float64)
    ys = positions[:, 0] * scale
    xs = positions[:, 1] * scale
    for oy in range(ph):
        for ox in range(pw):
            np.add.at(acc, (slice(None), ys + oy, xs + ox), patches[:, :, oy, ox].T)
            np.add.at(cnt, (ys + oy, xs + ox), 1.0)
    return acc, cnt


# --------------------------------------------------------------------------
# numba flavour
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_block_nanmean(a, factor):
        h = a.shape[0] // factor
        w = a.shape[1] // factor
        out = np.empty((h, w), dtype=np.float32)
        for i in range(h):
            for j in range(w):
                total = 0.0
                count = 0
                for u in range(factor):
                    for v in range(factor):
                        x = a[i * factor + u, j * factor + v]
                        if not np.isnan(x):
                            total += np.float64(x)
                            count += 1
                if count == 0:
                    out[i, j] = np.nan
                else:
                    out[i, j] = np.float32(total / count)
        return out

    @njit(cache=True)
    def _nb_pearson(ref, mov, ry0, mx0, my0, rx0, hh, ww):
        n = hh * ww
        sr = 0.0
        sm = 0.0
        for y in range(hh):
            for x in range(ww):
                sr += ref[ry0 + y, rx0 + x]
                sm += mov[my0 + y, mx0 + x]
        mr = sr / n
        mm = sm / n
        srr = 0.0
        smm = 0.0
        srm = 0.0
        for y in range(hh):
            for x in range(ww):
                a = ref[ry0 + y, rx0 + x] - mr
                b = mov[my0 + y, mx0 + x] - mm
                srr += a * a
                smm += b * b
                srm += a * b
        den = np.sqrt(srr * smm)
        if den <= 0.0:
            return 0.0
        return srm / den

    @njit(cache=True)
    def _nb_ncc_search(ref, mov, search):
        h, w = ref.shape
        best = -2.0
        best_dy = 0
        best_dx = 0
        for dy in range(-search, search + 1):
            for dx in range(-search, search + 1):
                my0 = max(0, dy)
                mx0 = max(0, dx)
                ry0 = max(0, -dy)
                rx0 = max(0, -dx)
                hh = h - abs(dy)
                ww = w - abs(dx)
                c = _nb_pearson(ref, mov, ry0, mx0, my0, rx0, hh, ww)
                if c > best + _TIE_TOL or (
                    c > best - _TIE_TOL and dy * dy + dx * dx < best_dy * best_dy + best_dx * best_dx
                ):
                    best = c
                    best_dy = dy
                    best_dx = dx
        return best_dy, best_dx, best

    @njit(cache=True)
    def _nb_majority3x3(labels, n_classes):
        h, w = labels.shape
        out = labels.copy()
        counts = np.zeros(max(n_classes, 1), dtype=np.int32)
        for i in range(h):
            for j in range(w):
                cur = labels[i, j]
                if cur < 0:
                    continue
                counts[:] = 0
                for u in range(max(0, i - 1), min(h, i + 2)):
                    for v in range(max(0, j - 1), min(w, j + 2)):
                        lab = labels[u, v]
                        if lab >= 0:
                            counts[lab] += 1
                best = 0
                for c in range(1, n_classes):
                    if counts[c] > counts[best]:
                        best = c
                if counts[cur] == counts[best]:
                    out[i, j] = cur
                else:
                    out[i, j] = best
        return out

    @njit(cache=True)
    def _nb_block_label_majority(labels, factor, n_classes):
        h = labels.shape[0] // factor
        w = labels.shape[1] // factor
        out = np.empty((h, w), dtype=np.int32)
        counts = np.zeros(max(n_classes, 1), dtype=np.int64)
        for i in range(h):
            for j in range(w):
                counts[:] = 0
                unlabeled = 0
                for u in range(factor):
                    for v in range(factor):
                        lab = labels[i * factor + u, j * factor + v]
                        if lab < 0:
                            unlabeled += 1
                        else:
                            counts[lab] += 1
                if n_classes == 0:
                    out[i, j] = -1
                    continue
                best = 0
                for c in range(1, n_classes):
                    if counts[c] > counts[best]:
                        best = c
                out[i, j] = -1 if unlabeled > counts[best] else best
        return out

    @njit(cache=True)
    def _nb_knn_rerank(train_x, train_y, test_x, cand, k, n_classes):
        m = cand.shape[1]
        d = train_x.shape[1]
        out = np.empty(test_x.shape[0], dtype=np.int32)
        best_d = np.empty(k, dtype=np.float64)
        best_i = np.empty(k, dtype=np.int64)
        votes = np.zeros(n_classes, dtype=np.int64)
        for t in range(test_x.shape[0]):
            filled = 0
            for c in range(m):
                i = cand[t, c]
                if i < 0:
                    break
                s = 0.0
                for j in range(d):
                    diff = train_x[i, j] - test_x[t, j]
                    s += diff * diff
                if filled == k and s >= best_d[k - 1]:
                    continue
                # strict insertion keeps the earlier (lower-class) row on ties
                pos = filled if filled < k else k - 1
                while pos > 0 and best_d[pos - 1] > s:
                    if pos < k:
                        best_d[pos] = best_d[pos - 1]
                        best_i[pos] = best_i[pos - 1]
                    pos -= 1
                best_d[pos] = s
                best_i[pos] = i
                if filled < k:
                    filled += 1
            votes[:] = 0
            for i in range(k):
                votes[train_y[best_i[i]]] += 1
            best = 0
            for c in range(1, n_classes):
                if votes[c] > votes[best]:
                    best = c
            out[t] = best
        return out

    def _nb_knn_predict(train_x, train_y, test_x, k, n_classes):
        return _knn_driver(_nb_knn_rerank, train_x, train_y, test_x, k, n_classes)

    @njit(cache=True)
    def _nb_overlap_add_impl(patches, positions, acc, cnt, scale):
        n, c, ph, pw = patches.shape
        for p in range(n):
            y0 = positions[p, 0] * scale
            x0 = positions[p, 1] * scale
            for oy in range(ph):
                for ox in range(pw):
                    cnt[y0 + oy, x0 + ox] += 1.0
                    for ch in range(c):
                        acc[ch, y0 + oy, x0 + ox] += patches[p, ch, oy, ox]

    def _nb_overlap_add(patches, positions, out_shape, scale):
        acc = np.zeros((patches.shape[1],) + tuple(out_shape), dtype=np.float64)
        cnt = np.zeros(tuple(out_shape), dtype=np.float64)
        _nb_overlap_add_impl(
            np.ascontiguousarray(patches, dtype=np.float64),
            np.ascontiguousarray(positions, dtype=np.int64),
            acc,
            cnt,
            scale,
        )
        return acc, cnt


NUMPY = SimpleNamespace(
    name="numpy",
    block_nanmean=_np_block_nanmean,
    ncc_search=_np_ncc_search,
    majority3x3=_np_majority3x3,
    block_label_majority=_np_block_label_majority,
    knn_predict=_np_knn_predict,
    overlap_add=_np_overlap_add,
)

if HAVE_NUMBA:
    NUMBA = SimpleNamespace(
        name="numba",
        block_nanmean=_nb_block_nanmean,
        ncc_search=_nb_ncc_search,
        majority3x3=_nb_majority3x3,
        block_label_majority=_nb_block_label_majority,
        knn_predict=_nb_knn_predict,
        overlap_add=_nb_overlap_add,
    )
else:  # pragma: no cover
    NUMBA = None


def backend(name: str | None = None) -> SimpleNamespace:
    """Return the kernel namespace for ``name`` ("numba" or "numpy").

    With no name, the active backend is returned.
    """
    if name is None:
        return ACTIVE
    if name == "numpy":
        return NUMPY
    if name == "numba":
        if NUMBA is None:
            raise RuntimeError("numba is not installed")
        return NUMBA
    raise ValueError(f"unknown kernel backend {name!r}")


ACTIVE = NUMPY if (DISABLED or NUMBA is None) else NUMBA


# thin dispatchers so callers never hold a stale reference to ACTIVE
def block_nanmean(a: np.ndarray, factor: int) -> np.ndarray:
    return ACTIVE.block_nanmean(np.ascontiguousarray(a, dtype=np.float32), int(factor))


def ncc_search(ref: np.ndarray, mov: np.ndarray, search: int) -> tuple[int, int, float]:
    dy, dx, c = ACTIVE.ncc_search(
        np.ascontiguousarray(ref, dtype=np.float64), np.ascontiguousarray(mov, dtype=np.float64), int(search)
    )
    return int(dy), int(dx), float(c)


def majority3x3(labels: np.ndarray, n_classes: int) -> np.ndarray:
    return ACTIVE.majority3x3(np.ascontiguousarray(labels, dtype=np.int32), int(n_classes))


def block_label_majority(labels: np.ndarray, factor: int, n_classes: int) -> np.ndarray:
    return ACTIVE.block_label_majority(np.ascontiguousarray(labels, dtype=np.int32), int(factor), int(n_classes))


def knn_predict(train_x, train_y, test_x, k: int, n_classes: int) -> np.ndarray:
    return ACTIVE.knn_predict(
        np.ascontiguousarray(train_x, dtype=np.float64),
        np.ascontiguousarray(train_y, dtype=np.int32),
        np.ascontiguousarray(test_x, dtype=np.float64),
        int(k),
        int(n_classes),
    )


def overlap_add(patches, positions, out_shape, scale: int):
    return ACTIVE.overlap_add(patches, np.asarray(positions, dtype=np.int64), out_shape, int(scale))


def patch_windows(grid: np.ndarray, size: int) -> np.ndarray:
    """View of all ``size`` x ``size`` windows of a (c, h, w) array.

    Result shape is (h - size + 1, w - size + 1, c, size, size); no copy.
    """
    return sliding_window_view(grid, (size, size), axis=(1, 2)).transpose(1, 2, 0, 3, 4)
