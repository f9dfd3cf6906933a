"""The masked autoencoder: patch embedding -> transformer -> reconstruction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Module, Tensor
from .config import ModelConfig
from .embedding import (PositionalEmbedding, TokenSequence, assemble_encoder_tokens, build_extractor,
                        make_mask_tokens)
from .reconstruction import ReconstructionModule, multitask_loss
from .transformer import MAETransformer, pool_global_feature

COMPONENTS = ("extractor", "pos_embed", "transformer", "reconstruction")


@dataclass
class PreparedBatch:
    """Geometry for a batch of clouds, computed outside the autodiff graph."""

    points: np.ndarray  # (B, N, 3) normalized (and augmented) clouds
    centers: np.ndarray  # (B, S, 3)
    local_patches: np.ndarray  # (B, S, K, 3) members relative to their center
    visible: np.ndarray  # (B, V)
    masked: np.ndarray  # (B, M)

    @property
    def size(self):
        return self.points.shape[0]


def prepare_cloud(points, cfg: ModelConfig, strategy="block", ratio=0.7, rng=None, fps_start=0):
    """FPS centers, KNN patches and a visible/masked split for one (already normalized) cloud."""
    rng = np.random.default_rng(rng)
    center_idx = geo.fps(points, cfg.num_patches, fps_start)
    patches = geo.knn_patchify(points, center_idx, cfg.patch_size)
    if strategy == "random":
        vis, msk = geo.mask_random(cfg.num_patches, ratio, rng)
    elif strategy == "block":
        vis, msk = geo.mask_block(patches.centers, ratio, rng)
    else:
        raise ValueError(f"unknown mask strategy {strategy!r}")
    return patches.with_mask(vis, msk)


def collate(clouds, patch_sets) -> PreparedBatch:
    pts = np.stack(clouds)
    centers = np.stack([p.centers for p in patch_sets])
    local = np.stack([c[p.patches] - p.centers[:, None, :] for c, p in zip(clouds, patch_sets)])
    return PreparedBatch(pts, centers, local,
                         np.stack([p.visible_idx for p in patch_sets]),
                         np.stack([p.masked_idx for p in patch_sets]))


@dataclass
class MAEOutput:
    pred_centers: Tensor
    pred_points: Tensor
    global_feature: Tensor
    decoded: Tensor
    encoder_tokens: TokenSequence
    decoder_tokens: TokenSequence
    mask_tokens: Optional[Tensor]


class MAE3D(Module):
    def __init__(self, cfg: ModelConfig, seed=1):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.extractor = build_extractor(cfg.extractor, cfg.d_feat, rng, cfg.extractor_hidden)
        self.pos_embed = PositionalEmbedding(cfg.d_pos, rng, cfg.pos_hidden)
        self.transformer = MAETransformer(cfg, rng)
        self.reconstruction = ReconstructionModule(cfg.dec_dim, cfg.num_patches, cfg.patch_size, rng,
                                                   cfg.patch_radius, cfg.center_hidden, cfg.fold_hidden)

    @property
    def dtype(self):
        return self.pos_embed.fc1.weight.dtype

    def _t(self, arr):
        return Tensor(np.asarray(arr, dtype=self.dtype))

    def encode(self, batch: PreparedBatch):
        """Embed visible patches and run the encoder. Masked patch members are never read."""
        rows = np.arange(batch.size)[:, None]
        visible_local = batch.local_patches[rows, batch.visible]  # (B, V, K, 3)
        psi = self.extractor(self._t(visible_local))
        phi_all = self.pos_embed(self._t(batch.centers))
        seq = assemble_encoder_tokens(psi, ad.gather(phi_all, batch.visible), self.transformer.tokens,
                                      batch.visible)
        return seq, self.transformer.encoder(seq), phi_all

    def forward(self, batch: PreparedBatch) -> MAEOutput:
        enc_seq, encoded, phi_all = self.encode(batch)
        mask_tokens = None
        if batch.masked.shape[1]:
            mask_tokens = make_mask_tokens(ad.gather(phi_all, batch.masked), self.transformer.tokens,
                                           batch.masked)
        dec_seq = self.transformer.assemble_decoder_tokens(encoded, enc_seq, mask_tokens, batch.masked)
        decoded = self.transformer.decoder(dec_seq)
        g = pool_global_feature(decoded)
        centers, points = self.reconstruction(g)
        return MAEOutput(centers, points, g, decoded, enc_seq, dec_seq, mask_tokens)

    def loss(self, batch: PreparedBatch, alpha=1.0, out: Optional[MAEOutput] = None):
        out = self.forward(batch) if out is None else out
        total, cd_c, cd_f = multitask_loss(out.pred_centers, self._t(batch.centers), out.pred_points,
                                           self._t(batch.points), alpha)
        return total, cd_c, cd_f, out

    def component_of(self, name: str) -> str:
        return name.split(".", 1)[0]
