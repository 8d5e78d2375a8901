"""Discrete VAE over patch embeddings.

Encoder: the tokenizer's own mini-PointNet embeds patches, a stack of edge
convolutions over the feature-space patch graph refines them, and a linear
projection yields per-patch logits over the token vocabulary. Sampling uses
straight-through Gumbel-softmax. Decoder: edge convolutions over the sampled
token vectors, then a folding stage that maps a fixed 2D grid through
token-conditioned MLPs to k center-relative 3D points per patch. Trained by
reconstruction (Chamfer) plus a KL term against the uniform token prior.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .embedder import EmbedderParams, embed_patches, init_embedder
from .params import Linear, linear_init
from .pointops import PatchSet, chamfer

__all__ = [
    "TokenizerParams",
    "init_tokenizer",
    "encode_tokens",
    "hard_token",
    "gumbel_discretize",
    "decode",
    "dvae_loss",
    "dvae_loss_batched",
    "feature_knn_indices",
]


@dataclass
class TokenizerParams:
    embed: EmbedderParams
    enc_gcn: list            # edge-conv Linears over patch features
    proj: Linear             # d -> |V|
    dec_gcn: list            # edge-conv Linears over token vectors
    fold1a: Linear
    fold1b: Linear
    fold2a: Linear
    fold2b: Linear
    vocab_size: int
    patch_points: int        # k, points produced per patch
    feat_knn: int
    grid: np.ndarray = field(repr=False, default=None)  # (k, 2) folding seed, fixed

    @property
    def dim(self) -> int:
        return self.proj.w.shape[0]


def _folding_grid(k: int) -> np.ndarray:
    side = int(np.ceil(np.sqrt(k)))
    axis = np.linspace(-0.5, 0.5, side)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)[:k]


def init_tokenizer(rng: np.random.Generator, dim: int, vocab_size: int,
                   patch_points: int, feat_knn: int = 4, dtype=np.float32) -> TokenizerParams:
    if vocab_size < 2:
        raise ValueError("vocab_size must be at least 2")
    return TokenizerParams(
        embed=init_embedder(rng, dim, dtype=dtype),
        enc_gcn=[linear_init(rng, 2 * dim, dim, dtype), linear_init(rng, 2 * dim, dim, dtype)],
        proj=linear_init(rng, dim, vocab_size, dtype),
        dec_gcn=[linear_init(rng, 2 * vocab_size, dim, dtype), linear_init(rng, 2 * dim, dim, dtype)],
        fold1a=linear_init(rng, dim + 3 + 2, dim, dtype),
        fold1b=linear_init(rng, dim, 3, dtype),
        fold2a=linear_init(rng, dim + 3 + 3, dim, dtype),
        fold2b=linear_init(rng, dim, 3, dtype),
        vocab_size=vocab_size,
        patch_points=patch_points,
        feat_knn=feat_knn,
        grid=_folding_grid(patch_points),
    )


def feature_knn_indices(x: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest neighbors in feature space, self excluded,
    ties by lower index. x: (..., g, c) -> (..., g, k)."""
    g = x.shape[-2]
    if not 1 <= k <= g - 1:
        raise ValueError(f"feature kNN needs 1 <= k <= g-1, got k={k}, g={g}")
    d2 = ((x[..., :, None, :] - x[..., None, :, :]) ** 2).sum(axis=-1)
    idx_diag = np.arange(g)
    d2[..., idx_diag, idx_diag] = np.inf
    order = np.argsort(d2, axis=-1, kind="stable")
    return order[..., :k]


def _edge_conv(x: ad.Tensor, lin: Linear, k: int) -> ad.Tensor:
    """DGCNN-style layer: gather feature-space neighbors, apply a shared MLP to
    [neighbor - self, self] edge features, max-pool over neighbors."""
    idx = feature_knn_indices(x.data, k)
    if x.ndim == 2:
        nbrs = ad.gather(x, idx)                       # (g, k, c)
    else:
        nbrs = ad.batched_gather(x, idx)               # (B, g, k, c)
    self_exp = ad.broadcast_to(ad.reshape(x, x.shape[:-1] + (1, x.shape[-1])), nbrs.shape)
    edges = ad.concat([nbrs - self_exp, self_exp], axis=-1)
    return ad.reduce_max(ad.relu(lin(edges)), axis=-2)


def encode_tokens(embeddings, params: TokenizerParams) -> ad.Tensor:
    """Patch embeddings (..., g, d) -> token logits (..., g, |V|)."""
    x = ad.as_tensor(embeddings)
    k = min(params.feat_knn, x.shape[-2] - 1)
    for lin in params.enc_gcn:
        x = _edge_conv(x, lin, k)
    return params.proj(x)


def hard_token(z) -> np.ndarray:
    """Row-wise one-hot at the argmax, ties to the lowest index."""
    data = z.data if isinstance(z, ad.Tensor) else np.asarray(z)
    idx = data.argmax(axis=-1)
    out = np.zeros_like(data)
    np.put_along_axis(out, np.expand_dims(idx, -1), 1.0, axis=-1)
    return out


def gumbel_discretize(z, temperature: float, rng: Optional[np.random.Generator] = None,
                      straight_through: bool = False, noise: Optional[np.ndarray] = None) -> ad.Tensor:
    """softmax((z + Gumbel noise) / temperature); with straight_through the
    forward value is exactly the one-hot argmax of the soft sample while the
    gradient is the soft sample's. `noise` overrides the rng draw (tests)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = ad.as_tensor(z)
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_discretize requires an rng (or explicit noise)")
        noise = rng.gumbel(size=z.shape)
    noise = np.asarray(noise, dtype=z.dtype)
    soft = ad.softmax((z + ad.Tensor(noise)) / temperature, axis=-1)
    if not straight_through:
        return soft
    hard = ad.Tensor(hard_token(soft.data))
    return hard + (soft - soft.detach())


def decode(tokens, centers, params: TokenizerParams) -> ad.Tensor:
    """Token rows (..., g, |V|) + centers (..., g, 3) -> center-relative
    reconstructed patches (..., g, k, 3)."""
    x = ad.as_tensor(tokens)
    if x.shape[-1] != params.vocab_size:
        raise ad.ShapeMismatchError(
            f"expected {params.vocab_size} token channels, got {x.shape[-1]}")
    c = ad.as_tensor(centers, dtype=x.dtype)
    k = min(params.feat_knn, x.shape[-2] - 1)
    for lin in params.dec_gcn:
        x = _edge_conv(x, lin, k)
    cond = ad.concat([x, c], axis=-1)                               # (..., g, d+3)
    kpts = params.patch_points
    cond = ad.reshape(cond, cond.shape[:-1] + (1, cond.shape[-1]))
    cond = ad.broadcast_to(cond, cond.shape[:-2] + (kpts, cond.shape[-1]))
    grid = np.broadcast_to(params.grid.astype(x.dtype), cond.shape[:-1] + (2,))
    fold1 = params.fold1b(ad.relu(params.fold1a(ad.concat([cond, ad.Tensor(grid)], axis=-1))))
    fold2 = params.fold2b(ad.relu(params.fold2a(ad.concat([cond, fold1], axis=-1))))
    return fold2


def dvae_loss_batched(patches, centers, params: TokenizerParams, temperature: float,
                      rng: Optional[np.random.Generator], beta: float = 0.0,
                      noise: Optional[np.ndarray] = None) -> tuple:
    """ELBO terms for a batch of patch sets.

    patches: (..., g, k, 3) targets, centers: (..., g, 3).
    recon: mean per-patch Chamfer between reconstruction and target.
    kl: mean KL(softmax(z_i) || uniform) = log|V| - H(softmax(z_i)).
    total = recon + beta * kl.
    """
    dtype = params.proj.w.dtype
    target = ad.as_tensor(patches, dtype=dtype)
    emb = embed_patches(target, params.embed)
    z = encode_tokens(emb, params)
    sampled = gumbel_discretize(z, temperature, rng, straight_through=True, noise=noise)
    recon_pts = decode(sampled, centers, params)
    recon = ad.reduce_mean(chamfer(recon_pts, target))
    lp = ad.log_softmax(z, axis=-1)
    kl = ad.reduce_mean(ad.reduce_sum(ad.exp(lp) * (lp + float(np.log(params.vocab_size))), axis=-1))
    total = recon + kl * float(beta)
    return total, recon, kl


def dvae_loss(patchset: PatchSet, params: TokenizerParams, temperature: float,
              rng: Optional[np.random.Generator] = None, beta: float = 0.0,
              noise: Optional[np.ndarray] = None) -> tuple:
    """ELBO terms (total, recon, kl) for one patch set."""
    return dvae_loss_batched(patchset.patches, patchset.centers, params,
                             temperature, rng, beta=beta, noise=noise)
