"""Synthetic point-cloud corpus: parametric shape samplers, augmentation,
deterministic generation, and the on-disk dataset format.

Cloud file: line 1 is "n 3 label" (label -1 when absent) followed by n lines
of three decimal coordinates; UTF-8, LF endings. A dataset directory holds a
manifest listing relative cloud paths with their split tag.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..pointops import PointCloud

__all__ = ["GenSpec", "Dataset", "SHAPE_NAMES", "sample_shape", "gen_synthetic",
           "write_dataset", "load_dataset", "random_rotation", "DataError"]


class DataError(ValueError):
    """Bad dataset request or malformed dataset file."""


def _sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _cube(n: int, rng: np.random.Generator) -> np.ndarray:
    face = rng.integers(6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for i in range(n):
        others = [a for a in range(3) if a != axis[i]]
        pts[i, axis[i]] = sign[i]
        pts[i, others[0]] = uv[i, 0]
        pts[i, others[1]] = uv[i, 1]
    return pts


def _cylinder(n: int, rng: np.random.Generator) -> np.ndarray:
    r, h = 0.5, 2.0
    lateral = 2 * np.pi * r * h
    caps = 2 * np.pi * r * r
    pts = np.empty((n, 3))
    on_side = rng.uniform(size=n) < lateral / (lateral + caps)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    z = rng.uniform(-1.0, 1.0, size=n)
    rad = r * np.sqrt(rng.uniform(size=n))
    cap_z = np.where(rng.uniform(size=n) < 0.5, 1.0, -1.0)
    pts[:, 0] = np.where(on_side, r, rad) * np.cos(theta)
    pts[:, 1] = np.where(on_side, r, rad) * np.sin(theta)
    pts[:, 2] = np.where(on_side, z, cap_z)
    return pts


def _cone(n: int, rng: np.random.Generator) -> np.ndarray:
    rb = 0.8
    slant = np.sqrt(rb * rb + 4.0)
    lateral = np.pi * rb * slant
    base = np.pi * rb * rb
    pts = np.empty((n, 3))
    on_side = rng.uniform(size=n) < lateral / (lateral + base)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    s = np.sqrt(rng.uniform(size=n))       # area-uniform distance fraction from apex
    rad = np.where(on_side, s * rb, rb * np.sqrt(rng.uniform(size=n)))
    pts[:, 0] = rad * np.cos(theta)
    pts[:, 1] = rad * np.sin(theta)
    pts[:, 2] = np.where(on_side, 1.0 - 2.0 * s, -1.0)
    return pts


def _torus(n: int, rng: np.random.Generator) -> np.ndarray:
    big, small = 0.8, 0.3
    pts = np.empty((n, 3))
    filled = 0
    while filled < n:  # rejection keeps the surface density uniform
        u = rng.uniform(0, 2 * np.pi, size=n)
        v = rng.uniform(0, 2 * np.pi, size=n)
        keep = rng.uniform(size=n) < (big + small * np.cos(v)) / (big + small)
        u, v = u[keep], v[keep]
        take = min(n - filled, u.size)
        ring = big + small * np.cos(v[:take])
        pts[filled:filled + take, 0] = ring * np.cos(u[:take])
        pts[filled:filled + take, 1] = ring * np.sin(u[:take])
        pts[filled:filled + take, 2] = small * np.sin(v[:take])
        filled += take
    return pts


def _plane_pair(n: int, rng: np.random.Generator) -> np.ndarray:
    pts = np.empty((n, 3))
    pts[:, :2] = rng.uniform(-1.0, 1.0, size=(n, 2))
    half = n // 2
    pts[:half, 2] = 0.5
    pts[half:, 2] = -0.5
    return pts


_SHAPES = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
    "plane-pair": _plane_pair,
}

SHAPE_NAMES = tuple(_SHAPES)


def sample_shape(name: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Raw (n, 3) surface sample of a unit-scale shape, before augmentation
    and ingestion normalization."""
    if name not in _SHAPES:
        raise DataError(f"unknown class {name!r}; known: {sorted(_SHAPES)}")
    return _SHAPES[name](n, rng)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrix (unit-quaternion construction)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass(frozen=True)
class GenSpec:
    classes: tuple
    train_per_class: int
    test_per_class: int
    n_points: int = 256
    scale_range: tuple = (0.8, 1.2)
    jitter_sigma: float = 0.01

    def __post_init__(self):
        if len(self.classes) < 2:
            raise DataError("need at least 2 classes for classification tasks")
        for name in self.classes:
            if name not in _SHAPES:
                raise DataError(f"unknown class {name!r}; known: {sorted(_SHAPES)}")


@dataclass
class Dataset:
    clouds: list
    splits: list                       # "train" / "test" per cloud
    class_names: Optional[tuple] = None
    seed: int = 0

    def indices(self, split: str) -> list:
        return [i for i, s in enumerate(self.splits) if s == split]

    @property
    def num_classes(self) -> int:
        labels = [c.label for c in self.clouds if c.label is not None]
        if not labels:
            return 0
        return max(labels) + 1

    def __len__(self) -> int:
        return len(self.clouds)


def gen_synthetic(spec: GenSpec, seed: int) -> Dataset:
    """Deterministic synthetic corpus: rotated, anisotropically scaled,
    jittered shape samples, normalized on ingestion."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    clouds, splits = [], []
    for label, name in enumerate(spec.classes):
        for split, count in (("train", spec.train_per_class), ("test", spec.test_per_class)):
            for _ in range(count):
                base = sample_shape(name, spec.n_points, rng)
                scale = rng.uniform(*spec.scale_range, size=3)
                rot = _random_rotation(rng)
                pts = (base * scale) @ rot.T
                pts = pts + rng.normal(0.0, spec.jitter_sigma, size=pts.shape)
                clouds.append(PointCloud.ingest(pts, label=label))
                splits.append(split)
    return Dataset(clouds=clouds, splits=splits, class_names=tuple(spec.classes), seed=seed)


def write_cloud(cloud: PointCloud, path) -> None:
    label = -1 if cloud.label is None else cloud.label
    lines = [f"{cloud.n} 3 {label}"]
    for x, y, z in cloud.points:
        lines.append(f"{x:.8f} {y:.8f} {z:.8f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_cloud(path) -> PointCloud:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise DataError(f"{path}: empty cloud file")
    header = lines[0].split()
    if len(header) != 3:
        raise DataError(f"{path}: header must be 'n 3 label'")
    n, dim, label = (int(v) for v in header)
    if dim != 3:
        raise DataError(f"{path}: only 3-dimensional points are supported")
    if len(lines) - 1 < n:
        raise DataError(f"{path}: expected {n} points, file has {len(lines) - 1}")
    pts = np.array([[float(v) for v in lines[1 + i].split()] for i in range(n)])
    if pts.shape != (n, 3):
        raise DataError(f"{path}: malformed coordinate lines")
    return PointCloud.ingest(pts, label=None if label < 0 else label)


def write_dataset(dataset: Dataset, out_dir) -> Path:
    """Write cloud files plus the manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    counters: dict = {}
    entries = []
    for cloud, split in zip(dataset.clouds, dataset.splits):
        if dataset.class_names is not None and cloud.label is not None:
            stem = dataset.class_names[cloud.label]
        else:
            stem = "cloud" if cloud.label is None else f"class{cloud.label}"
        key = (stem, split)
        counters[key] = counters.get(key, 0)
        rel = f"clouds/{stem}_{split}_{counters[key]:04d}.txt"
        counters[key] += 1
        write_cloud(cloud, out / rel)
        entries.append(f"{rel} {split}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(entries) + "\n", encoding="utf-8", newline="\n")
    return manifest


def load_dataset(path) -> Dataset:
    """Load from a manifest file or a directory containing manifest.txt."""
    p = Path(path)
    manifest = p / "manifest.txt" if p.is_dir() else p
    if not manifest.is_file():
        raise DataError(f"no manifest at {manifest}")
    clouds, splits = [], []
    for lineno, raw in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in ("train", "test"):
            raise DataError(f"{manifest}:{lineno}: expected '<relpath> train|test'")
        clouds.append(read_cloud(manifest.parent / parts[0]))
        splits.append(parts[1])
    if not clouds:
        raise DataError(f"{manifest}: empty dataset")
    return Dataset(clouds=clouds, splits=splits)
