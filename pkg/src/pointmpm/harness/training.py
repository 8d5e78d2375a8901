"""Training loops: dVAE tokenizer, masked-patch pre-training, classification
fine-tuning, and few-shot episodes.

Every loop is deterministic given the config seed (named rng streams derived
from one SeedSequence), writes one metrics record per epoch (flushed, so an
aborted run leaves a valid partial log), and aborts on the first non-finite
value with a diagnostic naming the phase, epoch, and step.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .. import autodiff as ad
from ..embedder import EmbedderParams, embed_patches, init_embedder, positional_embed
from ..encoder import EncoderParams, apply_mask_rows, encode, init_encoder
from ..params import Linear, linear_init, named_parameters, load_named_parameters
from ..pointops import block_mask, build_patches
from ..targets import (OmegaSchedule, PredictionHead, init_prediction_head,
                       mix_targets, omega_at, prediction_head, similarity, soften)
from ..tokenizer import TokenizerParams, dvae_loss_batched, encode_tokens, init_tokenizer
from .checkpoint import Checkpoint, CheckpointError, check_compatible, save_checkpoint
from .config import Config
from .data import DataError, Dataset
from .metrics import MetricsWriter
from .optim import AdamW, cosine_lr

__all__ = ["NonFiniteLossError", "PreparedData", "prepare", "train_dvae",
           "pretrain", "finetune_classify", "fewshot", "eval_checkpoint",
           "mpm_batch_loss", "ClsHead", "classifier_logits"]


class NonFiniteLossError(RuntimeError):
    """Training produced a non-finite value; carries phase/epoch/step context."""


def _streams(seed: int, *names: str) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def _batch_slices(indices, batch_size: int):
    for i in range(0, len(indices), batch_size):
        yield indices[i:i + batch_size]


@dataclass
class PreparedData:
    patches: np.ndarray      # (N, g, k, 3) float64
    centers: np.ndarray      # (N, g, 3) float64
    labels: np.ndarray       # (N,), -1 where unlabeled
    train_idx: np.ndarray
    test_idx: np.ndarray


def prepare(dataset: Dataset, config: Config) -> PreparedData:
    """Patchify every cloud once; patches are deterministic per cloud."""
    patches, centers, labels = [], [], []
    for cloud in dataset.clouds:
        ps = build_patches(cloud, config.num_patches, config.patch_size, config.fps_start)
        patches.append(ps.patches)
        centers.append(ps.centers)
        labels.append(-1 if cloud.label is None else cloud.label)
    return PreparedData(
        patches=np.stack(patches),
        centers=np.stack(centers),
        labels=np.asarray(labels, dtype=np.int64),
        train_idx=np.asarray(dataset.indices("train"), dtype=np.int64),
        test_idx=np.asarray(dataset.indices("test"), dtype=np.int64),
    )


def _params_arrays(obj) -> dict:
    return {name: t.data.copy() for name, t in named_parameters(obj)}


def _freeze(obj) -> None:
    for _, t in named_parameters(obj):
        t.requires_grad = False


def _grouped_optimizer(groups: dict, lr: float, weight_decay: float,
                       lr_scales=None) -> AdamW:
    named = []
    for group, obj in groups.items():
        named.extend((f"{group}.{name}", t) for name, t in named_parameters(obj))
    return AdamW(named, lr, weight_decay=weight_decay, lr_scales=lr_scales)


# ---------------------------------------------------------------- dVAE ----

def train_dvae(config: Config, dataset: Dataset, out_dir=None) -> tuple:
    """Optimize the tokenizer by reconstruction + KL; returns (checkpoint, records)."""
    rngs = _streams(config.seed, "init", "gumbel", "shuffle")
    dtype = config.dtype
    prep = prepare(dataset, config)
    if prep.train_idx.size == 0:
        raise DataError("dataset has no training clouds")

    tok = init_tokenizer(rngs["init"], config.model_dim, config.vocab_size,
                         config.patch_size, config.feat_knn, dtype)
    opt = AdamW(list(named_parameters(tok)), config.dvae_lr,
                weight_decay=config.weight_decay)

    steps_per_epoch = max(1, int(np.ceil(prep.train_idx.size / config.batch_size)))
    total_steps = steps_per_epoch * config.dvae_epochs
    ramp_steps = max(1, total_steps // 3)   # KL weight 0 -> kl_weight over first third

    records = []
    writer = MetricsWriter(Path(out_dir) / "dvae_metrics.log") if out_dir else None
    step = 0
    try:
        for epoch in range(config.dvae_epochs):
            order = rngs["shuffle"].permutation(prep.train_idx)
            lr = cosine_lr(config.dvae_lr, epoch, config.dvae_epochs)
            sums = np.zeros(3)
            temp = beta = None
            for batch in _batch_slices(order, config.batch_size):
                frac = step / max(total_steps - 1, 1)
                temp = config.gumbel_temp_start + frac * (config.gumbel_temp_end - config.gumbel_temp_start)
                beta = config.kl_weight * min(step / ramp_steps, 1.0)
                try:
                    total, recon, kl = dvae_loss_batched(
                        prep.patches[batch].astype(dtype), prep.centers[batch],
                        tok, temp, rngs["gumbel"], beta=beta)
                    opt.zero_grad()
                    total.backward()
                    opt.step(lr=lr)
                except ad.NonFiniteError as err:
                    raise NonFiniteLossError(
                        f"phase=dvae epoch={epoch} step={step}: {err}") from err
                sums += [total.item(), recon.item(), kl.item()]
                step += 1
            rec = dict(epoch=epoch, phase="dvae",
                       total=sums[0] / steps_per_epoch,
                       recon=sums[1] / steps_per_epoch,
                       kl=sums[2] / steps_per_epoch,
                       temperature=temp, beta=beta, lr=lr)
            records.append(rec)
            if writer:
                writer.write(**rec)
    finally:
        if writer:
            writer.close()

    ckpt = Checkpoint(config=config, epoch=config.dvae_epochs,
                      params={"tokenizer": _params_arrays(tok)},
                      optim={"tokenizer": opt.state_arrays()})
    if out_dir:
        save_checkpoint(ckpt, Path(out_dir) / "dvae.ckpt")
    return ckpt, records


# ------------------------------------------------------------ pre-train ----

def mpm_batch_loss(patches: np.ndarray, centers: np.ndarray, z: np.ndarray,
                   mask_mat: np.ndarray, emb: EmbedderParams, enc: EncoderParams,
                   head: PredictionHead, tau: float, omega: float,
                   refine_clean_pass: bool = False) -> tuple:
    """One masked-prediction forward pass over a batch.

    patches (B,g,k,3), centers (B,g,3), frozen token logits z (B,g,|V|),
    mask_mat (B,g) in {0,1}. Returns (loss, pred, h): soft cross-entropy
    averaged per-sample over masked patches, then over the batch.
    """
    dtype = emb.stage1a.w.dtype
    f = embed_patches(ad.Tensor(np.asarray(patches, dtype=dtype)), emb)
    pos = positional_embed(ad.Tensor(np.asarray(centers, dtype=dtype)), emb)
    masked = apply_mask_rows(f, mask_mat, enc)
    out = encode(masked, pos, enc)
    h_for_w = out.h
    if refine_clean_pass:
        h_for_w = encode(f, pos, enc).h
    p = soften(ad.Tensor(np.asarray(z, dtype=dtype)), tau)
    w = similarity(h_for_w)
    zhat = mix_targets(p, w, omega)
    pred = prediction_head(out.h, head)
    lp = ad.log_softmax(pred, axis=-1)
    ce = -ad.reduce_sum(zhat * lp, axis=-1)                     # (B, g)
    counts = mask_mat.sum(axis=-1, keepdims=True)
    if np.any(counts < 1):
        raise ValueError("every sample needs a non-empty mask")
    weights = (mask_mat / counts / mask_mat.shape[0]).astype(dtype)
    loss = ad.reduce_sum(ce * ad.Tensor(weights))
    return loss, pred, out.h


def pretrain(config: Config, dataset: Dataset, dvae_ckpt: Checkpoint, out_dir=None) -> tuple:
    """Masked-patch pre-training against a frozen tokenizer; returns
    (checkpoint, records)."""
    check_compatible(dvae_ckpt.config, config)
    if "tokenizer" not in dvae_ckpt.params:
        raise CheckpointError("checkpoint has no 'tokenizer' parameter group")
    dtype = config.dtype
    rngs = _streams(config.seed, "init", "mask", "shuffle")
    prep = prepare(dataset, config)
    if prep.train_idx.size == 0:
        raise DataError("dataset has no training clouds")

    tok = init_tokenizer(np.random.default_rng(0), config.model_dim, config.vocab_size,
                         config.patch_size, config.feat_knn, dtype)
    load_named_parameters(tok, dvae_ckpt.params["tokenizer"])
    _freeze(tok)

    # tokenizer is frozen and patches are deterministic: cache logits up front
    g, v = config.num_patches, config.vocab_size
    z_store = np.zeros((len(dataset.clouds), g, v), dtype=dtype)
    for batch in _batch_slices(prep.train_idx, config.batch_size):
        f = embed_patches(ad.Tensor(prep.patches[batch].astype(dtype)), tok.embed)
        z_store[batch] = encode_tokens(f, tok).data

    emb = init_embedder(rngs["init"], config.model_dim, dtype=dtype)
    enc = init_encoder(rngs["init"], config.model_dim, config.depth,
                       config.num_heads, config.ff_dim, dtype)
    head = init_prediction_head(rngs["init"], config.model_dim, config.vocab_size, dtype)
    opt = _grouped_optimizer({"embedder": emb, "encoder": enc, "head": head},
                             config.pretrain_lr, config.weight_decay)
    sched = (OmegaSchedule(total_epochs=config.pretrain_epochs,
                           warmup_epochs=config.omega_warmup_epochs,
                           floor=config.omega_floor)
             if config.omega_warmup else None)

    records = []
    writer = MetricsWriter(Path(out_dir) / "pretrain_metrics.log") if out_dir else None
    step = 0
    try:
        for epoch in range(config.pretrain_epochs):
            omega = omega_at(epoch, sched) if sched else config.omega_floor
            lr = cosine_lr(config.pretrain_lr, epoch, config.pretrain_epochs)
            order = rngs["shuffle"].permutation(prep.train_idx)
            loss_sum = 0.0
            ratio_sum = 0.0
            nsteps = 0
            for batch in _batch_slices(order, config.batch_size):
                masks = [block_mask(prep.centers[i],
                                    (config.mask_ratio_lo, config.mask_ratio_hi),
                                    rngs["mask"]) for i in batch]
                mask_mat = np.stack([m.as_vector(g) for m in masks])
                try:
                    loss, _, _ = mpm_batch_loss(
                        prep.patches[batch], prep.centers[batch], z_store[batch],
                        mask_mat, emb, enc, head, config.tau, omega,
                        refine_clean_pass=config.refine_clean_pass)
                    opt.zero_grad()
                    loss.backward()
                    opt.step(lr=lr)
                except ad.NonFiniteError as err:
                    raise NonFiniteLossError(
                        f"phase=pretrain epoch={epoch} step={step}: {err}") from err
                loss_sum += loss.item()
                ratio_sum += float(mask_mat.mean(axis=-1).mean())
                nsteps += 1
                step += 1
            rec = dict(epoch=epoch, phase="pretrain", mpm=loss_sum / nsteps,
                       omega=omega, mask_ratio=ratio_sum / nsteps, lr=lr)
            records.append(rec)
            if writer:
                writer.write(**rec)
    finally:
        if writer:
            writer.close()

    ckpt = Checkpoint(config=config, epoch=config.pretrain_epochs,
                      params={"embedder": _params_arrays(emb),
                              "tokenizer": {k: np.asarray(a).copy() for k, a in dvae_ckpt.params["tokenizer"].items()},
                              "encoder": _params_arrays(enc),
                              "head": _params_arrays(head)},
                      optim={"model": opt.state_arrays()})
    if out_dir:
        save_checkpoint(ckpt, Path(out_dir) / "pretrain.ckpt")
    return ckpt, records


# ------------------------------------------------------------- finetune ----

@dataclass
class ClsHead:
    fc1: Linear   # 3d -> d
    fc2: Linear   # d -> num_classes


def init_cls_head(rng: np.random.Generator, dim: int, num_classes: int, dtype) -> ClsHead:
    return ClsHead(fc1=linear_init(rng, 3 * dim, dim, dtype),
                   fc2=linear_init(rng, dim, num_classes, dtype))


def classifier_logits(patches: np.ndarray, centers: np.ndarray, emb: EmbedderParams,
                      enc: EncoderParams, cls: ClsHead) -> ad.Tensor:
    """No-mask forward; head input is h_cls || maxpool(h) || meanpool(h)."""
    dtype = emb.stage1a.w.dtype
    f = embed_patches(ad.Tensor(np.asarray(patches, dtype=dtype)), emb)
    pos = positional_embed(ad.Tensor(np.asarray(centers, dtype=dtype)), emb)
    out = encode(f, pos, enc)
    feat = ad.concat([out.h_cls,
                      ad.reduce_max(out.h, axis=-2),
                      ad.reduce_mean(out.h, axis=-2)], axis=-1)
    return cls.fc2(ad.gelu(cls.fc1(feat)))


def _accuracy(prep: PreparedData, idx: np.ndarray, emb, enc, cls, batch_size: int) -> float:
    if idx.size == 0:
        raise DataError("no clouds to evaluate")
    correct = 0
    for batch in _batch_slices(idx, batch_size):
        logits = classifier_logits(prep.patches[batch], prep.centers[batch], emb, enc, cls)
        correct += int((logits.data.argmax(axis=-1) == prep.labels[batch]).sum())
    return correct / idx.size


def finetune_classify(config: Config, dataset: Dataset, ckpt: Optional[Checkpoint] = None,
                      out_dir=None, metrics_name: str = "finetune_metrics.log") -> tuple:
    """Supervised fine-tuning (from a pre-trained checkpoint or from scratch).
    Returns (checkpoint, records, final test accuracy)."""
    dtype = config.dtype
    prep = prepare(dataset, config)
    if prep.train_idx.size == 0 or prep.test_idx.size == 0:
        raise DataError("fine-tuning needs both train and test clouds")
    labels = prep.labels
    if np.any(labels[np.concatenate([prep.train_idx, prep.test_idx])] < 0):
        raise DataError("fine-tuning requires labels on every cloud")
    num_classes = int(labels.max()) + 1
    if num_classes < 2:
        raise DataError("need at least 2 classes")

    rngs = _streams(config.seed, "init_backbone", "init_head", "shuffle")
    emb = init_embedder(rngs["init_backbone"], config.model_dim, dtype=dtype)
    enc = init_encoder(rngs["init_backbone"], config.model_dim, config.depth,
                       config.num_heads, config.ff_dim, dtype)
    if ckpt is not None:
        check_compatible(ckpt.config, config)
        for group, obj in (("embedder", emb), ("encoder", enc)):
            if group not in ckpt.params:
                raise CheckpointError(f"checkpoint has no {group!r} parameter group")
            load_named_parameters(obj, ckpt.params[group])
    cls = init_cls_head(rngs["init_head"], config.model_dim, num_classes, dtype)
    # the fresh head trains faster than the (possibly pre-trained) backbone
    opt = _grouped_optimizer({"embedder": emb, "encoder": enc, "cls_head": cls},
                             config.finetune_lr, config.weight_decay,
                             lr_scales={"cls_head": config.cls_head_lr_scale})

    records = []
    writer = MetricsWriter(Path(out_dir) / metrics_name) if out_dir else None
    acc = 0.0
    try:
        for epoch in range(config.finetune_epochs):
            lr = cosine_lr(config.finetune_lr, epoch, config.finetune_epochs)
            order = rngs["shuffle"].permutation(prep.train_idx)
            loss_sum, nsteps = 0.0, 0
            for batch in _batch_slices(order, config.batch_size):
                onehot = np.zeros((len(batch), num_classes), dtype=dtype)
                onehot[np.arange(len(batch)), labels[batch]] = 1.0
                try:
                    logits = classifier_logits(prep.patches[batch], prep.centers[batch],
                                               emb, enc, cls)
                    lp = ad.log_softmax(logits, axis=-1)
                    loss = -ad.reduce_mean(ad.reduce_sum(ad.Tensor(onehot) * lp, axis=-1))
                    opt.zero_grad()
                    loss.backward()
                    opt.step(lr=lr)
                except ad.NonFiniteError as err:
                    raise NonFiniteLossError(
                        f"phase=finetune epoch={epoch}: {err}") from err
                loss_sum += loss.item()
                nsteps += 1
            acc = _accuracy(prep, prep.test_idx, emb, enc, cls, config.batch_size)
            rec = dict(epoch=epoch, phase="finetune", loss=loss_sum / nsteps,
                       test_acc=acc, lr=lr)
            records.append(rec)
            if writer:
                writer.write(**rec)
    finally:
        if writer:
            writer.close()

    out_ckpt = Checkpoint(config=config, epoch=config.finetune_epochs,
                          params={"embedder": _params_arrays(emb),
                                  "encoder": _params_arrays(enc),
                                  "cls_head": _params_arrays(cls)},
                          optim={"model": opt.state_arrays()})
    if out_dir:
        save_checkpoint(out_ckpt, Path(out_dir) / "finetune.ckpt")
    return out_ckpt, records, acc


# -------------------------------------------------------------- fewshot ----

def fewshot(config: Config, dataset: Dataset, ckpt: Optional[Checkpoint],
            way: int, shot: int, episodes: int, query_per_class: int = 20,
            out_dir=None) -> tuple:
    """K-way m-shot episodes: fine-tune on way*shot support samples, evaluate
    on way*query_per_class queries. Returns (mean, std, per-episode accs)."""
    if episodes < 1:
        raise DataError("episodes must be >= 1")
    labels = [c.label for c in dataset.clouds]
    if any(l is None for l in labels):
        raise DataError("few-shot requires labels on every cloud")
    num_classes = max(labels) + 1
    pools = {c: [i for i, l in enumerate(labels) if l == c] for c in range(num_classes)}
    need = shot + query_per_class
    eligible = [c for c, pool in pools.items() if len(pool) >= need]
    if len(eligible) < way:
        raise DataError(
            f"need {way} classes with >= {need} samples, only {len(eligible)} qualify")

    rng = _streams(config.seed, "episodes")["episodes"]
    accs = []
    writer = MetricsWriter(Path(out_dir) / "fewshot_metrics.log") if out_dir else None
    try:
        for ep in range(episodes):
            chosen = rng.choice(np.asarray(eligible), size=way, replace=False)
            clouds, splits = [], []
            for new_label, c in enumerate(chosen):
                perm = rng.permutation(pools[int(c)])
                for i in perm[:shot]:
                    clouds.append(dataclasses.replace(dataset.clouds[i], label=new_label))
                    splits.append("train")
                for i in perm[shot:need]:
                    clouds.append(dataclasses.replace(dataset.clouds[i], label=new_label))
                    splits.append("test")
            episode_ds = Dataset(clouds=clouds, splits=splits)
            episode_cfg = dataclasses.replace(
                config, finetune_epochs=config.fewshot_epochs,
                seed=int(rng.integers(2 ** 31)))
            _, _, acc = finetune_classify(episode_cfg, episode_ds, ckpt=ckpt)
            accs.append(acc)
            if writer:
                writer.write(epoch=ep, phase="fewshot", way=way, shot=shot, acc=acc)
    finally:
        if writer:
            writer.close()
    return float(np.mean(accs)), float(np.std(accs)), accs


# ----------------------------------------------------------------- eval ----

def eval_checkpoint(ckpt: Checkpoint, dataset: Dataset) -> float:
    """Test-split accuracy of a fine-tuned classification checkpoint."""
    for group in ("embedder", "encoder", "cls_head"):
        if group not in ckpt.params:
            raise CheckpointError(f"checkpoint has no {group!r} parameter group")
    config = ckpt.config
    dtype = config.dtype
    rng = np.random.default_rng(0)
    emb = init_embedder(rng, config.model_dim, dtype=dtype)
    enc = init_encoder(rng, config.model_dim, config.depth, config.num_heads,
                       config.ff_dim, dtype)
    num_classes = ckpt.params["cls_head"]["fc2.w"].shape[1]
    cls = init_cls_head(rng, config.model_dim, num_classes, dtype)
    for group, obj in (("embedder", emb), ("encoder", enc), ("cls_head", cls)):
        load_named_parameters(obj, ckpt.params[group])
    prep = prepare(dataset, config)
    idx = prep.test_idx if prep.test_idx.size else np.arange(len(dataset.clouds))
    if np.any(prep.labels[idx] < 0):
        raise DataError("evaluation requires labeled clouds")
    return _accuracy(prep, idx, emb, enc, cls, config.batch_size)
