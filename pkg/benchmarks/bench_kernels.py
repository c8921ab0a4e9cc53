"""Time the numba kernels against their numpy fallbacks.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from apexseg.kernels import HAS_NUMBA, boundary_band, linear_assignment, warmup


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def cases(rng):
    cost = rng.normal(size=(20, 12))
    disc = np.hypot(*np.mgrid[-64:64, -64:64]) < 40
    return [
        ("linear_assignment 20x12", lambda u: linear_assignment(cost, use_numba=u)),
        ("boundary_band 128x128 r=3", lambda u: boundary_band(disc, 3.0, use_numba=u)),
    ]


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    if not HAS_NUMBA:
        print("numba is not installed; only the numpy fallback is timed")
    warmup()
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng):
        slow = best_of(lambda: fn(False), args.repeat) * 1e3
        if HAS_NUMBA:
            fast = best_of(lambda: fn(True), args.repeat) * 1e3
            print(f"{name:28s} {slow:10.3f} {fast:10.3f} {slow / fast:7.1f}x")
        else:
            print(f"{name:28s} {slow:10.3f} {'--':>10s} {'--':>8s}")


if __name__ == "__main__":
    main()
