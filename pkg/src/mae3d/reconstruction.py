"""Point cloud reconstruction: coarse patch centers, per-patch folding, multi-task Chamfer loss."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Module


def folding_grid(patch_size: int, radius: float) -> np.ndarray:
    """G x G lattice in [-0.5, 0.5]^2 scaled by ``radius``; returns (G*G, 2)."""
    g = int(round(np.sqrt(patch_size)))
    if g * g != patch_size:
        raise ValueError(f"grid size {patch_size} is not a perfect square")
    ticks = np.linspace(-0.5, 0.5, g)
    u, v = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([u.ravel(), v.ravel()], axis=1) * radius


class CenterHead(Module):
    """MLP global feature -> S x 3 coarse centers."""

    def __init__(self, d_glob, num_patches, rng, hidden=(512, 1024)):
        dims = (d_glob,) + tuple(hidden) + (num_patches * 3,)
        self.layers = [ad.Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.num_patches = num_patches

    def forward(self, g):
        x = g
        for lin in self.layers[:-1]:
            x = ad.relu(lin(x))
        return ad.reshape(self.layers[-1](x), (g.shape[0], self.num_patches, 3))


class FoldStage(Module):
    """One folding MLP: (g, u, v, c[, previous fold]) -> 3D offset.

    The first layer is one (d_in, h) weight; it is applied block-wise so the
    global-feature and center terms are computed once per cloud / per patch
    rather than once per generated point.
    """

    def __init__(self, d_glob, extra, rng, hidden=(256, 128)):
        self.d_glob = d_glob
        self.extra = extra
        self.fc1 = ad.Linear(d_glob + 2 + 3 + extra, hidden[0], rng)
        self.fc2 = ad.Linear(hidden[0], hidden[1], rng)
        self.fc3 = ad.Linear(hidden[1], 3, rng)

    def forward(self, g, grid, centers, prev=None):
        # g (B, dg); grid (K, 2) constant; centers (B, S, 3); prev (B, S, K, 3)
        w, dg = self.fc1.weight, self.d_glob
        bsz, s = centers.shape[:2]
        h = ad.reshape(ad.linear(g, w[:dg], self.fc1.bias), (bsz, 1, 1, -1))
        h = h + ad.reshape(ad.linear(ad.Tensor(grid.astype(w.dtype)), w[dg:dg + 2]), (1, 1, grid.shape[0], -1))
        h = h + ad.reshape(ad.linear(centers, w[dg + 2:dg + 5]), (bsz, s, 1, -1))
        if self.extra:
            h = h + ad.linear(prev, w[dg + 5:])
        h = ad.relu(h)
        return self.fc3(ad.relu(self.fc2(h)))


class FoldingDecoder(Module):
    def __init__(self, d_glob, rng, hidden=(256, 128)):
        self.stage1 = FoldStage(d_glob, 0, rng, hidden)
        self.stage2 = FoldStage(d_glob, 3, rng, hidden)

    def forward(self, g, centers, grid):
        """Points = center + fold offset, (B, S*K, 3)."""
        f1 = self.stage1(g, grid, centers)
        f2 = self.stage2(g, grid, centers, f1)
        bsz, s = centers.shape[:2]
        pts = ad.reshape(centers, (bsz, s, 1, 3)) + f2
        return ad.reshape(pts, (bsz, s * grid.shape[0], 3))


class ReconstructionModule(Module):
    def __init__(self, d_glob, num_patches, patch_size, rng, patch_radius=0.15,
                 center_hidden=(512, 1024), fold_hidden=(256, 128)):
        self.center_head = CenterHead(d_glob, num_patches, rng, center_hidden)
        self.fold = FoldingDecoder(d_glob, rng, fold_hidden)
        self.grid = folding_grid(patch_size, patch_radius)

    def predict_centers(self, g):
        return self.center_head(g)

    def fold_patches(self, g, centers):
        return self.fold(g, centers, self.grid)

    def forward(self, g):
        centers = self.predict_centers(g)
        return centers, self.fold_patches(g, centers)


def multitask_loss(pred_centers, centers, pred_points, points, alpha=1.0):
    """CD(pred centers, centers) + alpha * CD(pred cloud, full cloud), batch-averaged.

    Returns ``(total, center_term, fine_term)``.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    cd_c = ad.mean(ad.chamfer(pred_centers, centers))
    cd_f = ad.mean(ad.chamfer(pred_points, points))
    return cd_c + cd_f * alpha, cd_c, cd_f
