"""Time the numba kernels against their numpy fallbacks.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--size PX]

The first numba call includes JIT compilation, so every kernel is warmed up
once before timing. Results are printed as a table and the outputs of both
backends are compared (overlap_add sums in a different order per backend, so
it agrees to rounding rather than bit for bit).
"""

import argparse
import time

import numpy as np

from agrosr import _kernels


def _cases(size, rng):
    grid = rng.normal(0.4, 0.1, (size, size))
    grid[rng.random(grid.shape) < 0.01] = np.nan
    labels = rng.integers(-1, 4, (size, size)).astype(np.int32)
    ref = rng.normal(size=(size // 2, size // 2))
    mov = np.roll(ref, (2, -3), axis=(0, 1))
    train_x = rng.normal(size=(4000, 25))
    train_y = rng.integers(0, 4, 4000).astype(np.int32)
    test_x = rng.normal(size=(1000, 25))
    n_lo = size // 4 - 4
    pos = np.stack(np.meshgrid(np.arange(n_lo), np.arange(n_lo), indexing="ij"), -1).reshape(-1, 2)
    patches = rng.normal(size=(len(pos), 3, 10, 10))
    return {
        "block_nanmean": lambda k: k.block_nanmean(grid, 4),
        "ncc_search": lambda k: k.ncc_search(ref, mov, 8),
        "majority3x3": lambda k: k.majority3x3(labels, 4),
        "block_label_majority": lambda k: k.block_label_majority(labels, 4, 4),
        "knn_predict": lambda k: k.knn_predict(train_x, train_y, test_x, 5, 4),
        "overlap_add": lambda k: k.overlap_add(patches, pos, (size, size), 2),
    }


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if not np.array_equal(np.isnan(a), np.isnan(b)):
        return np.inf
    return float(np.nanmax(np.abs(a - b), initial=0.0))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=256)
    args = ap.parse_args(argv)

    if _kernels.NUMBA is None:
        print("numba is not installed; nothing to compare")
        return 1
    cases = _cases(args.size, np.random.default_rng(0))
    print(f"{'kernel':<22}{'numpy ms':>11}{'numba ms':>11}{'speedup':>9}{'max |diff|':>12}")
    for name, call in cases.items():
        call(_kernels.NUMBA)  # compile
        t_np, out_np = _best(lambda: call(_kernels.NUMPY), args.repeat)
        t_nb, out_nb = _best(lambda: call(_kernels.NUMBA), args.repeat)
        print(f"{name:<22}{t_np * 1e3:>11.2f}{t_nb * 1e3:>11.2f}{t_np / t_nb:>8.1f}x{_max_diff(out_np, out_nb):>12.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
