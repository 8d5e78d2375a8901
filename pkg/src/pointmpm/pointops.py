"""Deterministic point-cloud geometry: FPS, kNN grouping, patch building,
block masking, and a differentiable Chamfer distance.

Index-producing operations break every tie by lowest index so results can be
compared exactly against brute-force oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad

__all__ = [
    "PointCloud",
    "PatchSet",
    "MaskSet",
    "normalize_points",
    "farthest_point_sample",
    "knn",
    "build_patches",
    "block_mask",
    "chamfer",
]


def normalize_points(points: np.ndarray) -> np.ndarray:
    """Center at the centroid and scale so the farthest point has norm 1."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (n, 3) points, got {pts.shape}")
    if pts.shape[0] < 1:
        raise ValueError("point cloud must contain at least one point")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point coordinates must be finite")
    pts = pts - pts.mean(axis=0)
    scale = np.linalg.norm(pts, axis=1).max()
    if scale > 0:
        pts = pts / scale
    return pts


@dataclass
class PointCloud:
    """Unordered 3D point set, centered and unit-scaled on ingestion."""

    points: np.ndarray
    label: Optional[int] = None

    @classmethod
    def ingest(cls, points: np.ndarray, label: Optional[int] = None) -> "PointCloud":
        return cls(points=normalize_points(points), label=label)

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass
class PatchSet:
    """g local patches of k points each, expressed relative to their centers."""

    centers: np.ndarray           # (g, 3)
    patches: np.ndarray           # (g, k, 3), center-subtracted
    source: PointCloud
    center_indices: np.ndarray    # (g,) indices into source.points

    @property
    def g(self) -> int:
        return self.centers.shape[0]

    @property
    def k(self) -> int:
        return self.patches.shape[1]


@dataclass
class MaskSet:
    """Block mask: the m patches whose centers are nearest the seed center."""

    indices: np.ndarray           # sorted patch indices, seed included
    seed_index: int

    def ratio(self, g: int) -> float:
        return len(self.indices) / g

    def as_vector(self, g: int) -> np.ndarray:
        v = np.zeros(g, dtype=np.float64)
        v[self.indices] = 1.0
        return v


def farthest_point_sample(points: np.ndarray, g: int, start: int = 0) -> np.ndarray:
    """Greedy FPS indices: first pick is `start`, each next pick maximizes the
    min distance to all prior picks, ties to the lowest index."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if g > n:
        raise ValueError(f"cannot sample {g} centers from {n} points")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range for {n} points")
    picks = np.empty(g, dtype=np.int64)
    picks[0] = start
    min_d2 = ((pts - pts[start]) ** 2).sum(axis=1)
    for i in range(1, g):
        nxt = int(np.argmax(min_d2))  # argmax returns the first (lowest) index on ties
        picks[i] = nxt
        min_d2 = np.minimum(min_d2, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return picks


def knn(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Per query, indices of the k nearest points sorted by distance, ties by
    lower index. Returns (q, k)."""
    pts = np.asarray(points, dtype=np.float64)
    qs = np.asarray(queries, dtype=np.float64)
    n = pts.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points n={n}")
    d2 = ((qs[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    order = np.argsort(d2, axis=1, kind="stable")  # stable sort keeps index order on ties
    return order[:, :k]


def build_patches(cloud: PointCloud, g: int, k: int, start: int = 0) -> PatchSet:
    """FPS centers + kNN grouping + center subtraction. Patches may share
    points when g*k exceeds n."""
    center_idx = farthest_point_sample(cloud.points, g, start)
    centers = cloud.points[center_idx]
    neighbor_idx = knn(cloud.points, centers, k)
    patches = cloud.points[neighbor_idx] - centers[:, None, :]
    return PatchSet(centers=centers, patches=patches, source=cloud,
                    center_indices=center_idx)


def block_mask(centers: np.ndarray, ratio_range: tuple = (0.25, 0.45),
               rng: Optional[np.random.Generator] = None) -> MaskSet:
    """Mask a contiguous block: draw a ratio, pick a random seed patch, take
    the m centers nearest to it (seed included)."""
    if rng is None:
        raise ValueError("block_mask requires an explicit rng")
    centers = np.asarray(centers, dtype=np.float64)
    g = centers.shape[0]
    if g < 4:
        raise ValueError(f"block masking needs at least 4 patches, got g={g}")
    lo, hi = ratio_range
    m_lo = max(int(np.ceil(lo * g - 1e-9)), 1)
    m_hi = min(int(np.floor(hi * g + 1e-9)), g - 1)
    if m_lo > m_hi:
        raise ValueError(
            f"no mask size satisfies ratio range [{lo}, {hi}] for g={g}")
    r = rng.uniform(lo, hi)
    m = int(np.clip(round(r * g), m_lo, m_hi))
    seed = int(rng.integers(g))
    order = knn(centers, centers[seed:seed + 1], m)[0]
    return MaskSet(indices=np.sort(order), seed_index=seed)


def chamfer(a, b) -> ad.Tensor:
    """Symmetric Chamfer distance on squared Euclidean distances:
    mean over a of the nearest-b distance plus mean over b of the nearest-a
    distance. Accepts (n, 3) sets or batched (..., n, 3); differentiable."""
    a = ad.as_tensor(a)
    b = ad.as_tensor(b)
    if a.shape[-2] < 1 or b.shape[-2] < 1:
        raise ValueError("chamfer requires non-empty point sets")
    ae = ad.reshape(a, a.shape[:-2] + (a.shape[-2], 1, 3))
    be = ad.reshape(b, b.shape[:-2] + (1, b.shape[-2], 3))
    diff = ae - be
    d2 = ad.reduce_sum(diff * diff, axis=-1)          # (..., n, m)
    a_to_b = ad.reduce_mean(ad.reduce_min(d2, axis=-1), axis=-1)
    b_to_a = ad.reduce_mean(ad.reduce_min(d2, axis=-2), axis=-1)
    return a_to_b + b_to_a
