"""Compiled vs numpy kernel timings.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints one row per kernel with the best-of-N wall time for each backend
and the speedup. Exits non-zero if the compiled extension is missing.
"""
import argparse
import timeit

import numpy as np

from amtml import _kernels_py as py

try:
    from amtml import _ext as cy
except ImportError:  # pragma: no cover
    cy = None


def cases(rng):
    x = rng.standard_normal((32, 8, 16, 16))
    w = rng.standard_normal((16, 8, 3, 3))
    b = rng.standard_normal(16)
    gout = rng.standard_normal((32, 16, 16, 16))
    pool_in = rng.standard_normal((128, 64, 8, 8))
    _, idx = py.max_pool_argmax(pool_in)
    gpool = rng.standard_normal((128, 64))
    t = rng.dirichlet(np.ones(10), size=128)
    s = rng.dirichlet(np.ones(10), size=128)
    trip = np.array([rng.choice(128, 3, replace=False) for _ in range(256)], dtype=np.int64)
    return {
        "conv2d_forward 32x8x16x16 * 16x8x3x3": lambda m: m.conv2d_forward(x, w, b),
        "conv2d_backward": lambda m: m.conv2d_backward(x, w, gout),
        "max_pool_argmax 128x64x8x8": lambda m: m.max_pool_argmax(pool_in),
        "max_pool_backward": lambda m: m.max_pool_backward(gpool, idx, 8, 8),
        "angle_huber 128x10, 256 triplets": lambda m: m.angle_huber(t, s, trip, 1e-8),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if cy is None:
        raise SystemExit("compiled extension amtml._ext is not built")
    print(f"{'kernel':40s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(np.random.default_rng(0)).items():
        tp = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        tc = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:40s} {tp:10.3f} {tc:10.3f} {tp / tc:7.2f}x")


if __name__ == "__main__":
    main()
