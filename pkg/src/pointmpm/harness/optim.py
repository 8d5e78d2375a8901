"""Decoupled-weight-decay adaptive-moment optimizer and the cosine lr decay
used by every training loop."""

from __future__ import annotations

import math

import numpy as np

from .. import autodiff as ad

__all__ = ["AdamW", "cosine_lr"]


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    if total_epochs <= 1:
        return base_lr
    progress = epoch / (total_epochs - 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay over named parameter tensors.

    Updates replace each parameter's array (no in-place mutation), so graphs
    built before a step never alias updated data.
    """

    def __init__(self, named_params, lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, lr_scales=None):
        self.params = list(named_params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        # per-parameter lr factor by longest matching name prefix
        self._scale = {n: 1.0 for n in names}
        for prefix, factor in (lr_scales or {}).items():
            for n in names:
                if n == prefix or n.startswith(prefix + "."):
                    self._scale[n] = factor
        self.step_count = 0
        self._m = {n: np.zeros_like(t.data) for n, t in self.params}
        self._v = {n: np.zeros_like(t.data) for n, t in self.params}

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.grad = None

    def step(self, lr: float = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self._m[name] = self.beta1 * self._m[name] + (1.0 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            step_lr = lr * self._scale[name]
            new = p.data - step_lr * (update + self.weight_decay * p.data)
            p.data = new.astype(p.data.dtype, copy=False)

    def state_arrays(self) -> tuple:
        """(step, arrays) snapshot for checkpointing."""
        arrays = {}
        for name, _ in self.params:
            arrays[f"{name}.m"] = self._m[name].copy()
            arrays[f"{name}.v"] = self._v[name].copy()
        return self.step_count, arrays

    def load_state_arrays(self, step: int, arrays: dict) -> None:
        self.step_count = int(step)
        for name, p in self.params:
            for slot, store in (("m", self._m), ("v", self._v)):
                arr = np.asarray(arrays[f"{name}.{slot}"])
                if arr.shape != p.data.shape:
                    raise ValueError(f"optimizer state shape mismatch for {name}.{slot}")
                store[name] = arr.astype(p.data.dtype, copy=True)
