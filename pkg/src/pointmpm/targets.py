"""Multi-choice supervision targets for masked patch prediction.

Token logits are softened into per-patch distributions with a temperature
softmax, re-weighted by a row-stochastic similarity matrix built from the
transformer's unit-normalized patch representations, and mixed with a
scheduled weight omega that warms up at 1 (tokenizer-only targets) before
cosine-decaying to a floor. The mixed targets are detached: the prediction
loss is differentiable with respect to the prediction logits only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .params import Linear, linear_init
from .pointops import MaskSet

__all__ = ["OmegaSchedule", "PredictionHead", "init_prediction_head",
           "soften", "similarity", "mix_targets", "omega_at",
           "mpm_loss", "prediction_head"]


def soften(z, tau: float) -> ad.Tensor:
    """Row-wise temperature softmax over token logits (..., g, |V|)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return ad.softmax(ad.as_tensor(z) / tau, axis=-1)


def similarity(h) -> ad.Tensor:
    """Row softmax of pairwise inner products of unit-norm rows (..., g, d).

    Every diagonal entry is the row maximum because <h_i, h_i> = 1 bounds
    all other inner products of unit vectors.
    """
    h = ad.as_tensor(h)
    norms = np.linalg.norm(h.data, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-4):
        raise ValueError("similarity expects l2-normalized rows (within 1e-4)")
    axes = tuple(range(h.ndim - 2)) + (h.ndim - 1, h.ndim - 2)
    return ad.softmax(ad.matmul(h, ad.transpose(h, axes)), axis=-1)


def mix_targets(p, w, omega: float) -> ad.Tensor:
    """zhat = omega * P + (1 - omega) * W @ P, detached so no gradient can
    flow from the prediction loss back into the logits or representations."""
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"omega must be in [0, 1], got {omega}")
    p = ad.as_tensor(p)
    w = ad.as_tensor(w)
    mixed = p * float(omega) + ad.matmul(w, p) * float(1.0 - omega)
    return mixed.detach()


@dataclass(frozen=True)
class OmegaSchedule:
    total_epochs: int
    warmup_epochs: int = 30
    floor: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.floor <= 1.0:
            raise ValueError("floor must be in [0, 1]")
        if self.warmup_epochs >= self.total_epochs:
            raise ValueError("warmup_epochs must be smaller than total_epochs")


def omega_at(epoch: int, sched: OmegaSchedule) -> float:
    """1.0 during warm-up, then a cosine decay to the floor at total_epochs."""
    if epoch > sched.total_epochs:
        raise ValueError(f"epoch {epoch} beyond total_epochs {sched.total_epochs}")
    if epoch < sched.warmup_epochs:
        return 1.0
    span = sched.total_epochs - sched.warmup_epochs
    progress = (epoch - sched.warmup_epochs) / span
    return sched.floor + (1.0 - sched.floor) * (1.0 + math.cos(math.pi * progress)) / 2.0


def mpm_loss(pred_logits, targets, mask: MaskSet) -> ad.Tensor:
    """Soft cross-entropy over the masked patches only:
    mean_{i in M} of -sum_k zhat_{i,k} * log softmax(pred_logits_i)_k."""
    idx = np.asarray(mask.indices)
    if idx.size < 1:
        raise ValueError("mpm_loss requires a non-empty mask")
    pred = ad.as_tensor(pred_logits)
    t = ad.as_tensor(targets).detach()
    lp = ad.log_softmax(pred, axis=-1)
    ce = -ad.reduce_sum(t * lp, axis=-1)        # (g,)
    return ad.reduce_mean(ad.gather(ce, idx))


@dataclass
class PredictionHead:
    fc1: Linear
    fc2: Linear


def init_prediction_head(rng: np.random.Generator, dim: int, vocab_size: int,
                         dtype=np.float32) -> PredictionHead:
    return PredictionHead(fc1=linear_init(rng, dim, dim, dtype),
                          fc2=linear_init(rng, dim, vocab_size, dtype))


def prediction_head(h, params: PredictionHead) -> ad.Tensor:
    """Shared two-layer MLP per patch representation: (..., g, d) -> (..., g, |V|)."""
    return params.fc2(ad.gelu(params.fc1(ad.as_tensor(h))))
