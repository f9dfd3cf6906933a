"""Brute-force reference implementations used as independent test oracles.

Plain Python loops over tuples; nothing here touches the package kernels.
"""
import math


def sqdist(p, q):
    return sum((a - b) ** 2 for a, b in zip(p, q))


def fps_bruteforce(points, n_samples, start=0):
    pts = [tuple(map(float, p)) for p in points]
    chosen = [start]
    while len(chosen) < n_samples:
        best, best_d = None, -math.inf
        for i, p in enumerate(pts):
            if i in chosen:
                continue
            d = min(sqdist(p, pts[c]) for c in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def knn_bruteforce(points, query, k):
    pts = [tuple(map(float, p)) for p in points]
    order = sorted(range(len(pts)), key=lambda i: (sqdist(pts[i], query), i))
    return order[:k]


def chamfer_bruteforce(a, b):
    a = [tuple(map(float, p)) for p in a]
    b = [tuple(map(float, p)) for p in b]
    t1 = math.fsum(min(sqdist(x, y) for y in b) for x in a) / len(a)
    t2 = math.fsum(min(sqdist(y, x) for x in a) for y in b) / len(b)
    return t1 + t2


def central_diff(f, x, eps=1e-4):
    """Central finite-difference gradient of scalar ``f`` at numpy array ``x`` (modified in place, restored)."""
    import numpy as np

    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g
