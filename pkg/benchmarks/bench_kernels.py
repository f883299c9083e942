"""Time the numba kernels against their pure-numpy fallbacks.

Run with:  python3 benchmarks/bench_kernels.py
"""

import timeit

import numpy as np

from novabert import kernels as K


def bench(label, fn, args, repeat=5, number=20):
    best = min(timeit.repeat(lambda: fn(*args), repeat=repeat, number=number))
    per_call = best / number
    print(f"{label:<28} {per_call * 1e3:9.3f} ms/call")
    return per_call


def main():
    rng = np.random.default_rng(0)
    print(f"numba available: {K.NUMBA_ENABLED}")

    x = rng.standard_normal((4096, 200))
    print("\nsoftmax_rows, 4096x200")
    t_np = bench("numpy", K.softmax_rows_np, (x,))
    if K.NUMBA_ENABLED:
        K.softmax_rows_nb(x[:2].copy())  # compile outside the timing loop
        t_nb = bench("numba", K.softmax_rows_nb, (x,))
        print(f"{'speedup':<28} {t_np / t_nb:9.2f}x")

    idx = rng.integers(0, 4000, size=25600)
    grad = rng.standard_normal((25600, 128))
    print("\nscatter_add_rows, 25600 rows into 4000x128")
    out = np.zeros((4000, 128))
    t_np = bench("numpy", K.scatter_add_rows_np, (out, idx, grad))
    if K.NUMBA_ENABLED:
        K.scatter_add_rows_nb(np.zeros((4000, 128)), idx[:2], grad[:2])
        out = np.zeros((4000, 128))
        t_nb = bench("numba", K.scatter_add_rows_nb, (out, idx, grad))
        print(f"{'speedup':<28} {t_np / t_nb:9.2f}x")

    n = 2_000_000
    p = rng.standard_normal(n)
    g = rng.standard_normal(n)
    m = np.zeros(n)
    v = np.zeros(n)
    args = (p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001)
    print("\nadam_update, 2M parameters")
    t_np = bench("numpy", K.adam_update_np, args)
    if K.NUMBA_ENABLED:
        K.adam_update_nb(p[:2].copy(), g[:2], m[:2].copy(), v[:2].copy(),
                         1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001)
        t_nb = bench("numba", K.adam_update_nb, args)
        print(f"{'speedup':<28} {t_np / t_nb:9.2f}x")


if __name__ == "__main__":
    main()
