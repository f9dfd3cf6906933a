"""Point cloud primitives: normalization, sampling, patching, masking, Chamfer distance."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels


class GeometryError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise GeometryError(f"points must have shape (N, 3), got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise GeometryError("point coordinates must be finite")

    def __len__(self):
        return self.points.shape[0]


@dataclass
class PatchSet:
    """Patch groups of a source cloud.

    ``patches[i]`` holds the indices (into the source cloud) of the K points
    nearest to ``centers[i]``. ``visible_idx`` / ``masked_idx`` partition
    ``range(S)`` once a masking strategy has been applied.
    """

    center_idx: np.ndarray
    centers: np.ndarray
    patches: np.ndarray
    visible_idx: Optional[np.ndarray] = None
    masked_idx: Optional[np.ndarray] = None

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def patch_size(self) -> int:
        return self.patches.shape[1]

    def with_mask(self, visible_idx, masked_idx) -> "PatchSet":
        return PatchSet(self.center_idx, self.centers, self.patches,
                        np.asarray(visible_idx, dtype=np.int64),
                        np.asarray(masked_idx, dtype=np.int64))

    def coverage(self, n_points: int) -> float:
        return np.unique(self.patches).size / n_points


def _points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return PointCloud(cloud).points


def normalize_unit_sphere(cloud):
    """Translate the centroid to the origin and scale the farthest point to norm 1.

    Returns the same type it was given (``PointCloud`` or array).
    """
    pts = _points(cloud)
    if pts.shape[0] == 0:
        raise GeometryError("cannot normalize an empty cloud")
    centered = pts - pts.mean(axis=0)
    scale = np.sqrt((centered * centered).sum(axis=1)).max()
    if not scale > 0.0:
        raise GeometryError("zero extent: all points are identical")
    out = centered / scale
    if isinstance(cloud, PointCloud):
        return PointCloud(out, cloud.label)
    return out


def fps(cloud, n_samples: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling.

    Each new index maximizes the minimum squared distance to the points chosen
    so far; ties go to the lowest index.
    """
    pts = _points(cloud)
    n = pts.shape[0]
    if not 1 <= n_samples <= n:
        raise GeometryError(f"cannot sample {n_samples} centers from {n} points")
    if not 0 <= start_index < n:
        raise GeometryError(f"start_index {start_index} out of range for {n} points")
    return kernels.fps(pts, n_samples, start_index)


def knn_patchify(cloud, center_idx, k: int) -> PatchSet:
    pts = _points(cloud)
    center_idx = np.asarray(center_idx, dtype=np.int64)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise GeometryError(f"patch size {k} invalid for {n} points")
    if center_idx.size and (center_idx.min() < 0 or center_idx.max() >= n):
        raise GeometryError("center index out of range")
    centers = pts[center_idx]
    return PatchSet(center_idx, centers, kernels.knn(pts, centers, k))


def masked_count(n_patches: int, ratio: float) -> int:
    # Python's round() is ties-to-even
    return int(round(ratio * n_patches))


def _check_ratio(ratio):
    if not 0.0 <= ratio < 1.0:
        raise GeometryError(f"mask ratio must lie in [0, 1), got {ratio}")


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def mask_random(n_patches: int, ratio: float, rng=None):
    """Uniformly mask ``round(ratio * S)`` patches. Returns sorted (visible, masked)."""
    _check_ratio(ratio)
    m = masked_count(n_patches, ratio)
    perm = _rng(rng).permutation(n_patches)
    return np.sort(perm[m:]), np.sort(perm[:m])


def mask_block(centers, ratio: float, rng=None, seed_index: Optional[int] = None):
    """Mask the ``round(ratio * S)`` centers nearest to a randomly chosen seed center."""
    _check_ratio(ratio)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    s = centers.shape[0]
    m = masked_count(s, ratio)
    if seed_index is None:
        seed_index = int(_rng(rng).integers(s))
    if m == 0:
        return np.arange(s, dtype=np.int64), np.empty(0, dtype=np.int64)
    masked = kernels.knn(centers, centers[seed_index:seed_index + 1], m)[0]
    keep = np.ones(s, dtype=bool)
    keep[masked] = False
    return np.flatnonzero(keep).astype(np.int64), np.sort(masked)


def nearest_neighbors(src, dst):
    """Squared distance and index of the nearest ``dst`` point for each ``src`` point."""
    return kernels.nearest(src, dst)


def chamfer_distance(s1, s2) -> float:
    """Mean squared nearest-neighbour distance, summed over both directions."""
    a = _points(s1)
    b = _points(s2)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise GeometryError("chamfer distance of an empty cloud")
    d_ab, _ = kernels.nearest(a, b)
    d_ba, _ = kernels.nearest(b, a)
    return float(d_ab.mean() + d_ba.mean())
