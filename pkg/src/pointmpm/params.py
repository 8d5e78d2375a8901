"""Parameter containers: fan-in uniform init, a linear layer, and a generic
walker that yields every trainable tensor in a params dataclass with a
deterministic dotted name (used by the optimizer and checkpointing)."""

from __future__ import annotations

import dataclasses
from typing import Iterator

import numpy as np

from . import autodiff as ad

__all__ = ["Linear", "linear_init", "uniform_init", "named_parameters",
           "load_named_parameters", "count_parameters", "bind_structure"]


def uniform_init(rng: np.random.Generator, shape: tuple, bound: float, dtype) -> ad.Tensor:
    return ad.Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


@dataclasses.dataclass
class Linear:
    w: ad.Tensor  # (fan_in, fan_out)
    b: ad.Tensor  # (fan_out,)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.matmul(x, self.w) + self.b


def linear_init(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> Linear:
    bound = 1.0 / np.sqrt(fan_in)
    return Linear(w=uniform_init(rng, (fan_in, fan_out), bound, dtype),
                  b=uniform_init(rng, (fan_out,), bound, dtype))


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, ad.Tensor]]:
    """Walk dataclasses / lists / dicts, yielding (dotted-name, tensor) in a
    deterministic order (field order, list order, insertion order)."""
    if isinstance(obj, ad.Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_parameters(getattr(obj, f.name), name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for key, item in obj.items():
            yield from named_parameters(item, f"{prefix}.{key}" if prefix else str(key))
    # scalars / ndarray constants are not trainable parameters


def load_named_parameters(obj, arrays: dict) -> None:
    """Copy arrays into an existing params object, strict on names and shapes."""
    tensors = dict(named_parameters(obj))
    missing = sorted(set(tensors) - set(arrays))
    extra = sorted(set(arrays) - set(tensors))
    if missing or extra:
        raise ValueError(f"parameter name mismatch: missing={missing} extra={extra}")
    for name, t in tensors.items():
        arr = np.asarray(arrays[name])
        if arr.shape != t.data.shape:
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}")
        t.data = arr.astype(t.data.dtype, copy=True)
        t.grad = None


def count_parameters(obj) -> int:
    return sum(t.data.size for _, t in named_parameters(obj))


def bind_structure(obj, leaves: dict, prefix: str = ""):
    """Rebuild a params structure with named tensors swapped for `leaves`
    entries; tensors without a leaf become detached constants. Used to turn a
    params template into an Expression over its parameter names."""
    if isinstance(obj, ad.Tensor):
        return leaves[prefix] if prefix in leaves else obj.detach()
    if dataclasses.is_dataclass(obj):
        kwargs = {}
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            kwargs[f.name] = bind_structure(getattr(obj, f.name), leaves, name)
        return type(obj)(**kwargs)
    if isinstance(obj, list):
        return [bind_structure(v, leaves, f"{prefix}.{i}" if prefix else str(i))
                for i, v in enumerate(obj)]
    if isinstance(obj, tuple):
        return tuple(bind_structure(v, leaves, f"{prefix}.{i}" if prefix else str(i))
                     for i, v in enumerate(obj))
    if isinstance(obj, dict):
        return {k: bind_structure(v, leaves, f"{prefix}.{k}" if prefix else str(k))
                for k, v in obj.items()}
    return obj
