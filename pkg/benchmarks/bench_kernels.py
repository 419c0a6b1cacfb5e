"""Compare the compiled and numpy backends of the hot kernels.

    python3 benchmarks/bench_kernels.py [--sizes 500,2000,5000] [--length 200]

Prints a table of best-of-N wall times and the speedup.  Results are
checked for equality before timing.
"""
import argparse
import time

import numpy as np

from matvae.kernels import _fallback

try:
    from matvae.kernels import _ckernels
except ImportError:
    _ckernels = None


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def family(rng, n, length):
    # sequences scattered around a few parents, like a real MSA
    parents = rng.integers(0, 21, size=(8, length))
    enc = parents[rng.integers(0, 8, size=n)]
    flip = rng.random(enc.shape) < 0.25
    enc[flip] = rng.integers(0, 21, size=flip.sum())
    return np.ascontiguousarray(enc, dtype=np.int8)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="500,2000,5000")
    ap.add_argument("--length", type=int, default=200)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if _ckernels is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<20}{'n':>7}{'numpy s':>11}{'cython s':>11}{'speedup':>9}")
    for n in (int(s) for s in args.sizes.split(",")):
        enc = family(rng, n, args.length)
        assert np.array_equal(_fallback.neighbor_counts(enc, 0.2), _ckernels.neighbor_counts(enc, 0.2))
        tp = best_of(lambda: _fallback.neighbor_counts(enc, 0.2), args.repeats)
        tc = best_of(lambda: _ckernels.neighbor_counts(enc, 0.2), args.repeats)
        print(f"{'neighbor_counts':<20}{n:>7}{tp:>11.4f}{tc:>11.4f}{tp / tc:>8.1f}x")
    for n in (500, 2000):
        xyz = rng.normal(size=(n, 3)) * 20
        assert np.array_equal(_fallback.pairwise_distances(xyz), _ckernels.pairwise_distances(xyz))
        tp = best_of(lambda: _fallback.pairwise_distances(xyz), args.repeats)
        tc = best_of(lambda: _ckernels.pairwise_distances(xyz), args.repeats)
        print(f"{'pairwise_distances':<20}{n:>7}{tp:>11.4f}{tc:>11.4f}{tp / tc:>8.1f}x")


if __name__ == "__main__":
    main()
