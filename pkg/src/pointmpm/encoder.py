"""Transformer encoder over [cls] + patch tokens.

Pre-layer-norm residual blocks, multi-head attention, gelu MLPs, a final
layer norm, then l2-normalization of the patch rows. The cls row is returned
un-normalized. No dropout: evaluation is deterministic by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .params import Linear, linear_init, uniform_init
from .pointops import MaskSet

__all__ = ["EncoderBlock", "EncoderParams", "EncoderOutput", "init_encoder",
           "apply_mask", "apply_mask_rows", "encode"]


@dataclass
class EncoderBlock:
    ln1_gain: ad.Tensor
    ln1_bias: ad.Tensor
    wq: ad.Tensor     # (d, d); q/k/v projections carry no bias
    wk: ad.Tensor
    wv: ad.Tensor
    wo: Linear
    ln2_gain: ad.Tensor
    ln2_bias: ad.Tensor
    ff1: Linear
    ff2: Linear


@dataclass
class EncoderParams:
    cls_token: ad.Tensor      # (d,)
    mask_token: ad.Tensor     # (d,)
    blocks: list
    final_gain: ad.Tensor
    final_bias: ad.Tensor
    num_heads: int

    @property
    def dim(self) -> int:
        return self.cls_token.shape[0]


@dataclass
class EncoderOutput:
    h_cls: ad.Tensor          # (d,) or (B, d), not normalized
    h: ad.Tensor              # (g, d) or (B, g, d), unit rows


def init_encoder(rng: np.random.Generator, dim: int, depth: int, num_heads: int,
                 ff_dim: int, dtype=np.float32) -> EncoderParams:
    if dim % num_heads != 0:
        raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
    bound = 1.0 / np.sqrt(dim)

    def ln_pair():
        return (ad.Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
                ad.Tensor(np.zeros(dim, dtype=dtype), requires_grad=True))

    blocks = []
    for _ in range(depth):
        g1, b1 = ln_pair()
        g2, b2 = ln_pair()
        blocks.append(EncoderBlock(
            ln1_gain=g1, ln1_bias=b1,
            wq=uniform_init(rng, (dim, dim), bound, dtype),
            wk=uniform_init(rng, (dim, dim), bound, dtype),
            wv=uniform_init(rng, (dim, dim), bound, dtype),
            wo=linear_init(rng, dim, dim, dtype),
            ln2_gain=g2, ln2_bias=b2,
            ff1=linear_init(rng, dim, ff_dim, dtype),
            ff2=linear_init(rng, ff_dim, dim, dtype),
        ))
    fg, fb = ln_pair()
    return EncoderParams(
        cls_token=uniform_init(rng, (dim,), bound, dtype),
        mask_token=uniform_init(rng, (dim,), bound, dtype),
        blocks=blocks,
        final_gain=fg,
        final_bias=fb,
        num_heads=num_heads,
    )


def apply_mask_rows(embeddings: ad.Tensor, mask_vec: np.ndarray,
                    params: EncoderParams) -> ad.Tensor:
    """Replace rows where mask_vec is 1 with the learnable mask token.
    mask_vec: (..., g) in {0, 1}. Masked rows carry no gradient from the
    original embedding (it is multiplied by zero)."""
    v = ad.Tensor(np.asarray(mask_vec, dtype=embeddings.dtype)[..., None])
    return embeddings * (1.0 - v) + params.mask_token * v


def apply_mask(embeddings, mask: MaskSet, params: EncoderParams) -> ad.Tensor:
    """MaskSet variant for a single (g, d) embedding matrix."""
    emb = ad.as_tensor(embeddings)
    g = emb.shape[0]
    idx = np.asarray(mask.indices)
    if idx.size and (idx.min() < 0 or idx.max() >= g):
        raise IndexError(f"mask index out of range for g={g}")
    vec = np.zeros(g, dtype=emb.dtype)
    vec[idx] = 1.0
    return apply_mask_rows(emb, vec, params)


def _ln(x: ad.Tensor, gain: ad.Tensor, bias: ad.Tensor) -> ad.Tensor:
    return ad.layer_norm(x) * gain + bias


def _attention(x: ad.Tensor, block: EncoderBlock, num_heads: int) -> ad.Tensor:
    b, s, d = x.shape
    dh = d // num_heads

    def split_heads(t):
        return ad.transpose(ad.reshape(t, (b, s, num_heads, dh)), (0, 2, 1, 3))

    q = split_heads(ad.matmul(x, block.wq))
    k = split_heads(ad.matmul(x, block.wk))
    v = split_heads(ad.matmul(x, block.wv))
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    out = ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3))
    return block.wo(ad.reshape(out, (b, s, d)))


def encode(embeddings, positions, params: EncoderParams) -> EncoderOutput:
    """Run [cls] + (embeddings + positions) through the transformer.

    embeddings, positions: (g, d) or (B, g, d). Output h rows are
    l2-normalized; h_cls is left raw for the classification head.
    """
    emb = ad.as_tensor(embeddings)
    pos = ad.as_tensor(positions)
    if emb.shape != pos.shape:
        raise ad.ShapeMismatchError(
            f"embeddings {emb.shape} and positions {pos.shape} differ")
    single = emb.ndim == 2
    if single:
        emb = ad.reshape(emb, (1,) + emb.shape)
        pos = ad.reshape(pos, (1,) + pos.shape)
    bsz, g, d = emb.shape
    if d != params.dim:
        raise ad.ShapeMismatchError(f"model width {params.dim} != input width {d}")

    cls = ad.broadcast_to(ad.reshape(params.cls_token, (1, 1, d)), (bsz, 1, d))
    x = ad.concat([cls, emb + pos], axis=1)
    for block in params.blocks:
        x = x + _attention(_ln(x, block.ln1_gain, block.ln1_bias), block, params.num_heads)
        x = x + block.ff2(ad.gelu(block.ff1(_ln(x, block.ln2_gain, block.ln2_bias))))
    x = _ln(x, params.final_gain, params.final_bias)

    h_cls = ad.reshape(ad.batched_gather(x, np.zeros((bsz, 1), dtype=np.int64)), (bsz, d))
    patch_rows = ad.batched_gather(x, np.tile(np.arange(1, g + 1), (bsz, 1)))
    h = ad.l2_normalize(patch_rows, axis=-1)
    if single:
        h_cls = ad.reshape(h_cls, (d,))
        h = ad.reshape(h, (g, d))
    return EncoderOutput(h_cls=h_cls, h=h)
