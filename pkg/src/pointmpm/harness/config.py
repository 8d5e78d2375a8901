"""Flat key=value configuration with validated load and named presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["Config", "ConfigError", "PRESETS", "preset"]


class ConfigError(ValueError):
    """Bad configuration file or value."""


@dataclass
class Config:
    # data / patchify
    n_points: int = 256
    num_patches: int = 16        # g
    patch_size: int = 16         # k points per patch
    fps_start: int = 0
    mask_ratio_lo: float = 0.25
    mask_ratio_hi: float = 0.45
    # model widths
    vocab_size: int = 64
    model_dim: int = 64
    depth: int = 3
    num_heads: int = 4
    ff_dim: int = 128
    feat_knn: int = 4
    # supervision targets
    tau: float = 0.005
    omega_floor: float = 0.8
    omega_warmup_epochs: int = 30
    omega_warmup: bool = True    # off: omega held at the floor from epoch 0
    refine_clean_pass: bool = False
    # tokenizer (dVAE) training
    dvae_epochs: int = 40
    dvae_lr: float = 1e-3
    gumbel_temp_start: float = 1.0
    gumbel_temp_end: float = 0.0625
    kl_weight: float = 0.1       # final beta; ramps 0 -> this over the first third
    # pre-training
    pretrain_epochs: int = 60
    pretrain_lr: float = 1e-3
    # fine-tuning / few-shot
    finetune_epochs: int = 60
    finetune_lr: float = 1e-3
    cls_head_lr_scale: float = 10.0
    fewshot_epochs: int = 40
    # loop / optimizer
    batch_size: int = 16
    weight_decay: float = 0.01
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if not 0.0 <= self.mask_ratio_lo <= self.mask_ratio_hi <= 1.0:
            raise ConfigError("mask ratio range must satisfy 0 <= lo <= hi <= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not 0.0 <= self.omega_floor <= 1.0:
            raise ConfigError("omega_floor must be in [0, 1]")
        if self.omega_warmup and self.omega_warmup_epochs >= self.pretrain_epochs:
            raise ConfigError("omega_warmup_epochs must be smaller than pretrain_epochs")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError("model_dim must be divisible by num_heads")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")
        if self.num_patches > self.n_points or self.patch_size > self.n_points:
            raise ConfigError("num_patches and patch_size cannot exceed n_points")
        if self.num_patches < 4:
            raise ConfigError("num_patches must be at least 4 (block masking)")
        if self.gumbel_temp_start <= 0 or self.gumbel_temp_end <= 0:
            raise ConfigError("gumbel temperatures must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8", newline="\n")

    @classmethod
    def from_text(cls, text: str, base: "Config" = None) -> "Config":
        values = dataclasses.asdict(base) if base is not None else {}
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in fields:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, value, fields[key])
        return cls(**values)

    @classmethod
    def from_file(cls, path, base: "Config" = None) -> "Config":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        return cls.from_text(text, base=base)

    def with_overrides(self, pairs) -> "Config":
        """Apply KEY=VALUE override strings on top of this config."""
        return Config.from_text("\n".join(pairs), base=self)


def _parse_value(key: str, value: str, ftype) -> object:
    ftype = str(ftype)
    if "bool" in ftype:
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if "int" in ftype:
            return int(value)
        if "float" in ftype:
            return float(value)
    except ValueError as err:
        raise ConfigError(f"{key}: {err}") from err
    return value


PRESETS = {
    # desk: defaults above
    "desk": lambda: Config(),
    # paper-scale patchification: 1024 points into 64 patches of 32 points,
    # same 25-45% block-mask range
    "paper-scale": lambda: Config(n_points=1024, num_patches=64, patch_size=32),
}


def preset(name: str) -> Config:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return PRESETS[name]()
