"""Patch embedding: per-patch features, center positional embedding, token assembly."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Parameter, Tensor

ROLE_CLASS, ROLE_VISIBLE, ROLE_MASK = 0, 1, 2


class PointNetExtractor(Module):
    """Shared per-point MLP (3 -> 64 -> 128 -> d_feat) with layer norm + ReLU
    between layers, max-pooled over the points of each patch."""

    def __init__(self, d_feat, rng, hidden=(64, 128)):
        dims = (3,) + tuple(hidden) + (d_feat,)
        self.linears = [ad.Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.norms = [ad.LayerNorm(d) for d in hidden]
        self.d_feat = d_feat

    def point_features(self, x):
        for lin, norm in zip(self.linears[:-1], self.norms):
            x = ad.relu(norm(lin(x)))
        return self.linears[-1](x)

    def forward(self, patches):
        """(..., K, 3) local coordinates -> (..., d_feat)."""
        if patches.shape[-2] == 0:
            raise ValueError("cannot extract features from an empty patch")
        return ad.tmax(self.point_features(patches), axis=-2)


EXTRACTORS = {"pointnet": PointNetExtractor}


def build_extractor(name, d_feat, rng, hidden=(64, 128)):
    try:
        cls = EXTRACTORS[name]
    except KeyError:
        raise ValueError(f"unknown extractor {name!r}; available: {sorted(EXTRACTORS)}") from None
    return cls(d_feat, rng, hidden=hidden)


class PositionalEmbedding(Module):
    """Two-layer MLP from a patch center (3,) to a d_pos vector."""

    def __init__(self, d_pos, rng, hidden=64):
        self.fc1 = ad.Linear(3, hidden, rng)
        self.fc2 = ad.Linear(hidden, d_pos, rng)

    def forward(self, centers):
        return self.fc2(ad.relu(self.fc1(centers)))


class LearnedEmbeddings(Module):
    """Class-token feature/position and the mask-token feature."""

    def __init__(self, d_feat, d_pos, rng, num_patches=None, per_patch_mask=False,
                 dtype=ad.DEFAULT_DTYPE):
        self.cls_feat = Parameter((0.02 * rng.standard_normal(d_feat)).astype(dtype))
        self.cls_pos = Parameter((0.02 * rng.standard_normal(d_pos)).astype(dtype))
        shape = (num_patches, d_feat) if per_patch_mask else (d_feat,)
        self.mask_feat = Parameter((0.02 * rng.standard_normal(shape)).astype(dtype))
        self.per_patch_mask = per_patch_mask

    def class_token(self):
        return ad.concat([self.cls_feat, self.cls_pos], axis=0)


@dataclass
class TokenSequence:
    tokens: Tensor  # (B, T, D)
    roles: np.ndarray  # (B, T) role code per position
    patch_index: np.ndarray  # (B, T), -1 for the class token

    def __len__(self):
        return self.tokens.shape[1]


def assemble_encoder_tokens(psi, phi, learned: LearnedEmbeddings, patch_index) -> TokenSequence:
    """Token i = concat(psi_i, phi_i); the class token goes in front."""
    if psi.shape[:2] != phi.shape[:2]:
        raise ad.ShapeError(f"feature/position count mismatch: {psi.shape} vs {phi.shape}")
    bsz, v = psi.shape[:2]
    d_tok = learned.cls_feat.shape[0] + learned.cls_pos.shape[0]
    if psi.shape[2] + phi.shape[2] != d_tok:
        raise ad.ShapeError(f"token dims {psi.shape[2]} + {phi.shape[2]} do not match class token dim {d_tok}")
    cls = ad.broadcast_to(ad.reshape(learned.class_token(), (1, 1, d_tok)), (bsz, 1, d_tok))
    tokens = ad.concat([cls, ad.concat([psi, phi], axis=-1)], axis=1)
    roles = np.tile(np.array([ROLE_CLASS] + [ROLE_VISIBLE] * v), (bsz, 1))
    idx = np.concatenate([np.full((bsz, 1), -1), np.asarray(patch_index).reshape(bsz, v)], axis=1)
    return TokenSequence(tokens, roles, idx)


def make_mask_tokens(phi_masked, learned: LearnedEmbeddings, masked_idx=None):
    """Mask token = concat(shared learnable feature, positional embedding of the center)."""
    bsz, m, _ = phi_masked.shape
    if learned.per_patch_mask:
        feat = ad.gather(ad.broadcast_to(ad.reshape(learned.mask_feat, (1,) + learned.mask_feat.shape),
                                         (bsz,) + learned.mask_feat.shape), masked_idx)
    else:
        d = learned.mask_feat.shape[0]
        feat = ad.broadcast_to(ad.reshape(learned.mask_feat, (1, 1, d)), (bsz, m, d))
    return ad.concat([feat, phi_masked], axis=-1)
