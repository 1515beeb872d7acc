"""Time the compiled kernels against their numpy twins.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Both paths are imported from the same module, so one process measures both
regardless of VITBIS_DISABLE_NUMBA. Shapes follow the convolutions the model
actually runs (3x3 and 5x5 context convs, k4/s2 transposed convs, patch
embedding) plus the bias-table scatter of the attention backward.
"""

import argparse
import time

import numpy as np

from vitbis import _kernels as K

CONV_SHAPES = [
    # (batch, channels, padded size, k, stride)
    (8, 16, 10, 3, 1),
    (8, 32, 12, 5, 1),
    (8, 64, 18, 4, 2),
    (16, 128, 34, 3, 1),
    (8, 1, 32, 4, 4),
]
SCATTER_SHAPES = [(256, 49, 4), (4096, 49, 4), (65536, 225, 8)]


def best_of(fn, repeat):
    fn()  # warm-up, includes jit compilation on first call
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def out_size(hp, k, s):
    return (hp - k) // s + 1


def bench(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for b, c, hp, k, s in CONV_SHAPES:
        oh = out_size(hp, k, s)
        xp = rng.standard_normal((b, c, hp, hp))
        cols = K.im2col_numpy(xp, k, s, oh, oh)
        tag = f"b{b} c{c} {hp}x{hp} k{k} s{s}"
        pairs = [
            ("im2col", lambda: K.im2col_numpy(xp, k, s, oh, oh), lambda: K.im2col(xp, k, s, oh, oh)),
            ("col2im", lambda: K.col2im_numpy(cols, xp.shape, k, s, oh, oh), lambda: K.col2im(cols, xp.shape, k, s, oh, oh)),
        ]
        for name, ref, fast in pairs:
            assert np.array_equal(ref(), fast())
            rows.append((name, tag, best_of(ref, repeat), best_of(fast, repeat)))
    for n, table, heads in SCATTER_SHAPES:
        idx = rng.integers(0, table, n)
        vals = rng.standard_normal((n, heads))
        tag = f"n{n} table{table} h{heads}"

        def ref():
            return K.scatter_add_rows_numpy(np.zeros((table, heads)), idx, vals)

        def fast():
            return K.scatter_add_rows(np.zeros((table, heads)), idx, vals)

        assert np.array_equal(ref(), fast())
        rows.append(("scatter_add", tag, best_of(ref, repeat), best_of(fast, repeat)))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    print(f"active backend: {K.backend()}")
    if not K.HAVE_NUMBA:
        print("numba unavailable or disabled; both columns time the numpy path")
    print(f"{'kernel':<12} {'shape':<26} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, tag, t_np, t_nb in bench(args.repeat):
        print(f"{name:<12} {tag:<26} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} {t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    main()
