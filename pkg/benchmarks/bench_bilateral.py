"""Compare the compiled and numpy bilateral backends.

Usage::

    python benchmarks/bench_bilateral.py [--size 512] [--window 2] [--threads 1 2 4 8] [--repeats 5]

Reports the best-of-N wall time of the forward filter and of the 8-tangent
JVP for each backend and thread count, and checks that every thread count
reproduces the single-threaded output bit for bit.
"""

import argparse
import os
import time

import numpy as np

from lle.isp import backend


def best_time(fn, repeats):
    fn()  # warm-up (allocations, OpenMP pool start)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--jvp-size", type=int, default=256)
    ap.add_argument("--window", type=int, default=2)
    ap.add_argument("--threads", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    img = rng.random((args.size, args.size, 3))
    small = rng.random((args.jvp_size, args.jvp_size, 3))
    tangents = rng.standard_normal((8,) + small.shape)
    s1, s2 = np.array([1.0, 1.5, 2.0]), np.array([0.1, 0.2, 0.3])
    d1, d2 = rng.standard_normal((8, 3)), rng.standard_normal((8, 3))
    w = args.window

    print(f"compiled backend available: {backend.BACKEND == 'cython'}   cpus: {os.cpu_count()}")
    print(f"forward {args.size}x{args.size}x3, jvp {args.jvp_size}x{args.jvp_size}x3 with 8 tangents, w={w}\n")
    print(f"{'backend':<8} {'threads':>7} {'forward ms':>11} {'jvp ms':>9} {'speedup':>8} {'bit-identical':>14}")

    py_fwd = best_time(lambda: backend.bilateral_kernel(img, s1, s2, w, backend="python"), max(1, args.repeats // 2))
    py_jvp = best_time(lambda: backend.bilateral_jvp_kernel(small, tangents, s1, s2, d1, d2, w, backend="python"),
                       max(1, args.repeats // 2))
    print(f"{'python':<8} {1:>7} {1e3 * py_fwd:>11.1f} {1e3 * py_jvp:>9.1f} {'-':>8} {'-':>14}")

    if backend.BACKEND != "cython":
        print("\ncompiled core not built; only the numpy fallback was timed")
        return 0

    ref = backend.bilateral_kernel(img, s1, s2, w, num_threads=1, backend="cython")
    base = None
    for n in args.threads:
        fwd = best_time(lambda: backend.bilateral_kernel(img, s1, s2, w, num_threads=n, backend="cython"),
                        args.repeats)
        jvp = best_time(lambda: backend.bilateral_jvp_kernel(small, tangents, s1, s2, d1, d2, w, num_threads=n,
                                                             backend="cython"), args.repeats)
        same = np.array_equal(backend.bilateral_kernel(img, s1, s2, w, num_threads=n, backend="cython"), ref)
        base = base or fwd
        print(f"{'cython':<8} {n:>7} {1e3 * fwd:>11.1f} {1e3 * jvp:>9.1f} {base / fwd:>7.2f}x {str(same):>14}")
    print(f"\ncompiled vs numpy (1 thread, forward): {py_fwd / base:.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
