"""Compiled vs numpy geometry kernels on pretraining-sized inputs.

    python benchmarks/bench_kernels.py [--repeats 5] [--points 2048]

Each kernel is run on identical inputs by both backends. The outputs are
checked for bit-identity before any timing is reported.
"""
import argparse
import sys
import timeit

import numpy as np

from mae3d import _kernels_py

try:
    from mae3d import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def cases(n_points, n_centers, k, seed=0):
    rng = np.random.default_rng(seed)
    pts = np.ascontiguousarray(rng.normal(size=(n_points, 3)))
    centers = np.ascontiguousarray(pts[:n_centers])
    pred = np.ascontiguousarray(rng.normal(size=(n_points, 3)))
    return {
        f"fps  N={n_points} S={n_centers}": lambda m: m.fps(pts, n_centers, 0),
        f"knn  N={n_points} S={n_centers} K={k}": lambda m: m.knn(pts, centers, k),
        f"nearest {n_points}x{n_points} (Chamfer)": lambda m: m.nearest(pred, pts),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.asarray(a).tobytes() == np.asarray(b).tobytes()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--points", type=int, default=2048)
    ap.add_argument("--centers", type=int, default=32)
    ap.add_argument("-k", type=int, default=64)
    args = ap.parse_args(argv)
    if _kernels_c is None:
        print("compiled extension not built; only the numpy fallback is available", file=sys.stderr)
        return 1
    print(f"{'kernel':<36} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    for name, fn in cases(args.points, args.centers, args.k).items():
        if not same(fn(_kernels_py), fn(_kernels_c)):
            print(f"{name}: outputs differ between backends", file=sys.stderr)
            return 2
        t_py = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeats)) * 1e3
        t_c = min(timeit.repeat(lambda: fn(_kernels_c), number=1, repeat=args.repeats)) * 1e3
        print(f"{name:<36} {t_py:10.2f} {t_c:10.2f} {t_py / t_c:7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
