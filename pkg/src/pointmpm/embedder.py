"""Patch and positional embeddings.

Patches go through a two-stage pointwise MLP with max-pooling (mini-PointNet
style): per-point features are pooled over the patch, the pooled vector is
concatenated back onto every point, a second pointwise MLP runs, and a final
max-pool yields one permutation-invariant vector per patch. Centers go
through a small MLP to produce positional embeddings of the same width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .params import Linear, linear_init

__all__ = ["EmbedderParams", "init_embedder", "embed_patch", "embed_patches", "positional_embed"]


@dataclass
class EmbedderParams:
    stage1a: Linear  # 3 -> h
    stage1b: Linear  # h -> h
    stage2a: Linear  # 2h -> d
    stage2b: Linear  # d -> d
    pos1: Linear     # 3 -> d
    pos2: Linear     # d -> d

    @property
    def dim(self) -> int:
        return self.stage2b.w.shape[1]


def init_embedder(rng: np.random.Generator, dim: int, hidden: int = 0,
                  dtype=np.float32) -> EmbedderParams:
    h = hidden or max(dim // 2, 4)
    return EmbedderParams(
        stage1a=linear_init(rng, 3, h, dtype),
        stage1b=linear_init(rng, h, h, dtype),
        stage2a=linear_init(rng, 2 * h, dim, dtype),
        stage2b=linear_init(rng, dim, dim, dtype),
        pos1=linear_init(rng, 3, dim, dtype),
        pos2=linear_init(rng, dim, dim, dtype),
    )


def embed_patches(patches, params: EmbedderParams) -> ad.Tensor:
    """patches: (..., k, 3) -> (..., d). Pointwise ops + max-pools only, so the
    result is invariant to point order within each patch."""
    x = ad.as_tensor(patches)
    feat = ad.relu(params.stage1b(ad.relu(params.stage1a(x))))      # (..., k, h)
    pooled = ad.reduce_max(feat, axis=-2, keepdims=True)            # (..., 1, h)
    pooled = ad.broadcast_to(pooled, feat.shape)
    feat = ad.concat([feat, pooled], axis=-1)                       # (..., k, 2h)
    feat = ad.relu(params.stage2b(ad.relu(params.stage2a(feat))))   # (..., k, d)
    return ad.reduce_max(feat, axis=-2)                             # (..., d)


def embed_patch(patch, params: EmbedderParams) -> ad.Tensor:
    """Single patch (k, 3) -> (d,)."""
    patch = ad.as_tensor(patch)
    if patch.ndim != 2 or patch.shape[1] != 3:
        raise ad.ShapeMismatchError(f"expected a (k, 3) patch, got {patch.shape}")
    return embed_patches(patch.reshape(1, *patch.shape), params)[0]


def positional_embed(centers, params: EmbedderParams) -> ad.Tensor:
    """centers: (..., 3) -> (..., d) via a two-layer MLP on raw coordinates."""
    c = ad.as_tensor(centers)
    single = c.ndim == 1
    if single:
        c = c.reshape(1, 3)
    out = params.pos2(ad.gelu(params.pos1(c)))
    return out[0] if single else out
