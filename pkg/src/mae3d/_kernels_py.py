"""Pure numpy implementations of the geometry kernels.

Same signatures and the same tie rules as the compiled ``_kernels`` module.
"""
import numpy as np

# rows of the pairwise block evaluated at once in ``nearest``; bounds memory at ~8 MB
_CHUNK = 512


def _sqdist(pts, q):
    dx = pts[..., 0] - q[..., 0]
    dy = pts[..., 1] - q[..., 1]
    dz = pts[..., 2] - q[..., 2]
    return dx * dx + dy * dy + dz * dz


def fps(pts, n_samples, start):
    n = pts.shape[0]
    out = np.empty(n_samples, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = start
    for s in range(n_samples):
        out[s] = cur
        mind[cur] = -1.0
        d = _sqdist(pts, pts[cur])
        live = mind >= 0.0
        np.minimum(mind, d, out=mind, where=live)
        # np.argmax returns the first maximum, i.e. the lowest index on ties
        cur = int(np.argmax(mind))
    return out


def knn(pts, queries, k):
    d = _sqdist(pts[None, :, :], queries[:, None, :])
    return np.argsort(d, axis=1, kind="stable")[:, :k].astype(np.int64)


def nearest(src, dst):
    n = src.shape[0]
    dist = np.empty(n, dtype=np.float64)
    idx = np.empty(n, dtype=np.int64)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        d = _sqdist(src[lo:hi, None, :], dst[None, :, :])
        j = np.argmin(d, axis=1)
        idx[lo:hi] = j
        dist[lo:hi] = d[np.arange(hi - lo), j]
    return dist, idx
