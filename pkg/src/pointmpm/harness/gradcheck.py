"""Gradient checks for every differentiable component at tiny shapes.

Each check builds an Expression whose leaves are the component's parameters
plus its inputs, reduces the output to a scalar with a fixed random
projection, and compares the analytic gradient against central finite
differences in float64.
"""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..embedder import embed_patches, init_embedder, positional_embed
from ..encoder import apply_mask, encode, init_encoder
from ..params import bind_structure, named_parameters
from ..pointops import MaskSet, chamfer
from ..targets import init_prediction_head, mpm_loss, prediction_head
from ..tokenizer import decode, encode_tokens, init_tokenizer

__all__ = ["run_gradchecks", "MODULE_TOLERANCE"]

MODULE_TOLERANCE = 1e-4


def _leaves_for(template, objs_and_inputs):
    """bindings + leaf names for a params template plus named input arrays."""
    bindings = {}
    for name, t in named_parameters(template):
        bindings[name] = np.asarray(t.data, dtype=np.float64)
    for name, arr in objs_and_inputs.items():
        bindings[name] = np.asarray(arr, dtype=np.float64)
    return bindings


def _projected(out: ad.Tensor, proj: np.ndarray) -> ad.Tensor:
    return ad.reduce_sum(out * ad.Tensor(np.asarray(proj, dtype=np.float64)))


def run_gradchecks(seed: int = 0, eps: float = 1e-5) -> list:
    """Returns [(name, max_rel_err)] for every checked component."""
    rng = np.random.default_rng(seed)
    dim, g, k, vocab, heads, ff = 8, 4, 4, 5, 2, 16
    results = []

    # embedder: patch embedding
    emb = init_embedder(rng, dim, dtype=np.float64)
    patch = rng.normal(size=(k, 3))
    proj = rng.normal(size=(dim,))
    expr = ad.Expression(
        lambda lv: _projected(embed_patches(lv["patch"], bind_structure(emb, lv)), proj),
        list(_leaves_for(emb, {"patch": patch})))
    results.append(("embedder", ad.grad_check(expr, _leaves_for(emb, {"patch": patch}), eps=eps)))

    # embedder: positional embedding
    center = rng.normal(size=(3,))
    expr = ad.Expression(
        lambda lv: _projected(positional_embed(lv["center"], bind_structure(emb, lv)), proj),
        list(_leaves_for(emb, {"center": center})))
    results.append(("positional", ad.grad_check(expr, _leaves_for(emb, {"center": center}), eps=eps)))

    # tokenizer: embeddings -> logits
    tok = init_tokenizer(rng, dim, vocab, patch_points=k, feat_knn=2, dtype=np.float64)
    feats = rng.normal(size=(g, dim))
    proj_v = rng.normal(size=(g, vocab))
    enc_names = [n for n, _ in named_parameters(tok) if n.startswith(("enc_gcn", "proj"))]
    b = _leaves_for(tok, {"feats": feats})
    expr = ad.Expression(
        lambda lv: _projected(encode_tokens(lv["feats"], bind_structure(tok, lv)), proj_v),
        list(b))
    results.append(("tokenizer_encode", ad.grad_check(expr, b, eps=eps, wrt=enc_names + ["feats"])))

    # tokenizer: tokens -> decoded patches -> chamfer against a fixed target
    tokens = rng.normal(size=(g, vocab))
    centers = rng.normal(size=(g, 3))
    target = rng.normal(size=(g, k, 3))
    dec_names = [n for n, _ in named_parameters(tok)
                 if n.startswith(("dec_gcn", "fold"))]
    b = _leaves_for(tok, {"tokens": tokens})
    expr = ad.Expression(
        lambda lv: ad.reduce_mean(chamfer(decode(lv["tokens"], centers, bind_structure(tok, lv)), target)),
        list(b))
    results.append(("tokenizer_decode", ad.grad_check(expr, b, eps=eps, wrt=dec_names + ["tokens"])))

    # transformer encoder
    enc = init_encoder(rng, dim, depth=1, num_heads=heads, ff_dim=ff, dtype=np.float64)
    emb_in = rng.normal(size=(g, dim))
    pos_in = rng.normal(size=(g, dim))
    proj_h = rng.normal(size=(g, dim))
    proj_c = rng.normal(size=(dim,))
    b = _leaves_for(enc, {"emb": emb_in, "pos": pos_in})

    def enc_fn(lv):
        out = encode(lv["emb"], lv["pos"], bind_structure(enc, lv))
        return _projected(out.h, proj_h) + _projected(out.h_cls, proj_c)

    expr = ad.Expression(enc_fn, list(b))
    results.append(("encoder", ad.grad_check(expr, b, eps=eps)))

    # prediction head
    head = init_prediction_head(rng, dim, vocab, dtype=np.float64)
    h_in = rng.normal(size=(g, dim))
    b = _leaves_for(head, {"h": h_in})
    expr = ad.Expression(
        lambda lv: _projected(prediction_head(lv["h"], bind_structure(head, lv)), proj_v),
        list(b))
    results.append(("prediction_head", ad.grad_check(expr, b, eps=eps)))

    # full masked-prediction loss: patches -> embed -> mask -> encode -> head -> loss
    patches = rng.normal(size=(g, k, 3)) * 0.3
    mask = MaskSet(indices=np.array([1, 2]), seed_index=1)
    zhat = rng.dirichlet(np.ones(vocab), size=g)
    b = _leaves_for(emb, {"patches": patches})
    b.update(_leaves_for(enc, {}))
    b.update(_leaves_for(head, {}))

    def mpm_fn(lv):
        e = bind_structure(emb, lv)
        t = bind_structure(enc, lv)
        q = bind_structure(head, lv)
        f = embed_patches(lv["patches"], e)
        pos = positional_embed(ad.Tensor(centers.astype(np.float64)), e)
        out = encode(apply_mask(f, mask, t), pos, t)
        return mpm_loss(prediction_head(out.h, q), zhat, mask)

    expr = ad.Expression(mpm_fn, list(b))
    results.append(("mpm_loss_composite", ad.grad_check(expr, b, eps=eps)))

    return results
