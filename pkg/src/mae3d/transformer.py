"""Asymmetric transformer: encoder over visible tokens, decoder over all patches."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Module
from .config import ConfigError
from .embedding import ROLE_MASK, LearnedEmbeddings, TokenSequence


class Attention(Module):
    def __init__(self, dim, heads, rng):
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.q = ad.Linear(dim, dim, rng)
        self.k = ad.Linear(dim, dim, rng)
        self.v = ad.Linear(dim, dim, rng)
        self.proj = ad.Linear(dim, dim, rng)
        self.heads = heads
        self.keep_attention = False
        self.last_attention = None

    def _split(self, x):
        b, t, d = x.shape
        return ad.transpose(ad.reshape(x, (b, t, self.heads, d // self.heads)), (0, 2, 1, 3))

    def forward(self, x):
        b, t, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d // self.heads))
        attn = ad.softmax(scores, axis=-1)
        if self.keep_attention:
            self.last_attention = attn.data
        out = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
        return self.proj(out)


class Block(Module):
    """Pre-norm block: x + attn(ln(x)), then x + ffn(ln(x)) with a GELU FFN."""

    def __init__(self, dim, heads, mlp_ratio, dropout_p, rng):
        self.norm1 = ad.LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = ad.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = ad.Linear(dim, hidden, rng)
        self.fc2 = ad.Linear(hidden, dim, rng)
        self.drop = ad.Dropout(dropout_p, rng)

    def forward(self, x):
        x = x + self.drop(self.attn(self.norm1(x)))
        return x + self.drop(self.fc2(ad.gelu(self.fc1(self.norm2(x)))))


class Encoder(Module):
    def __init__(self, d_in, dim, depth, heads, mlp_ratio, dropout_p, rng):
        if depth < 1:
            raise ConfigError("encoder depth must be >= 1")
        self.input_proj = ad.Linear(d_in, dim, rng)
        self.blocks = [Block(dim, heads, mlp_ratio, dropout_p, rng) for _ in range(depth)]
        self.norm = ad.LayerNorm(dim)

    def forward(self, seq: TokenSequence):
        if np.any(seq.roles == ROLE_MASK):
            raise ValueError("encoder input must not contain mask tokens")
        x = self.input_proj(seq.tokens)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class Decoder(Module):
    def __init__(self, dim, depth, heads, mlp_ratio, dropout_p, rng, num_patches):
        if depth < 1:
            raise ConfigError("decoder depth must be >= 1")
        self.blocks = [Block(dim, heads, mlp_ratio, dropout_p, rng) for _ in range(depth)]
        self.norm = ad.LayerNorm(dim)
        self.num_patches = num_patches

    def forward(self, seq: TokenSequence):
        if len(seq) != self.num_patches + 1:
            raise ValueError(f"decoder expects {self.num_patches + 1} tokens (class + all patches), got {len(seq)}")
        x = seq.tokens
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


def pool_global_feature(decoded):
    """Elementwise max over the patch tokens; position 0 (class token) is skipped."""
    return ad.tmax(decoded[:, 1:], axis=1)


class MAETransformer(Module):
    """Learned tokens, encoder, the enc->dec projections and the decoder."""

    def __init__(self, cfg, rng):
        self.tokens = LearnedEmbeddings(cfg.d_feat, cfg.d_pos, rng, cfg.num_patches, cfg.per_patch_mask_tokens)
        self.encoder = Encoder(cfg.d_tok, cfg.enc_dim, cfg.enc_depth, cfg.enc_heads, cfg.mlp_ratio,
                               cfg.dropout_p, rng)
        self.enc_to_dec = ad.Linear(cfg.enc_dim, cfg.dec_dim, rng)
        self.mask_to_dec = ad.Linear(cfg.d_tok, cfg.dec_dim, rng)
        self.decoder = Decoder(cfg.dec_dim, cfg.dec_depth, cfg.dec_heads, cfg.mlp_ratio, cfg.dropout_p, rng,
                               cfg.num_patches)
        self.num_patches = cfg.num_patches

    def attention_modules(self):
        return [m for m in self.modules() if isinstance(m, Attention)]

    def assemble_decoder_tokens(self, encoded, enc_seq: TokenSequence, mask_tokens, masked_idx):
        """Class token first, then one token per patch in original patch order."""
        bsz = encoded.shape[0]
        parts = [self.enc_to_dec(encoded)]
        index = [enc_seq.patch_index]
        roles = [enc_seq.roles]
        if mask_tokens is not None and mask_tokens.shape[1]:
            parts.append(self.mask_to_dec(mask_tokens))
            index.append(np.asarray(masked_idx).reshape(bsz, -1))
            roles.append(np.full((bsz, mask_tokens.shape[1]), ROLE_MASK))
        tokens = ad.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        patch_index = np.concatenate(index, axis=1)
        roles = np.concatenate(roles, axis=1)
        # class token sits at -1, so a stable argsort puts it first and the patches in order
        order = np.argsort(patch_index, axis=1, kind="stable")
        tokens = ad.gather(tokens, order)
        patch_index = np.take_along_axis(patch_index, order, axis=1)
        return TokenSequence(tokens, np.take_along_axis(roles, order, axis=1), patch_index)
