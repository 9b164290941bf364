"""Deterministic point-set kernels: normalization, farthest point sampling, kNN.

All tie-breaking is by smallest index so results are reproducible and can be
compared against brute-force oracles.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray
    id: str = ""

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ValueError(f"positions must be N x 3 with N >= 1, got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValueError(f"cloud {self.id!r} has non-finite coordinates")
        col = np.asarray(self.colors, dtype=np.float64)
        if col.shape != pos.shape:
            raise ValueError(f"colors shape {col.shape} does not match positions {pos.shape}")
        if not np.all(np.isfinite(col)) or col.min() < 0.0 or col.max() > 1.0:
            raise ValueError(f"cloud {self.id!r} has colors outside [0, 1]")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", col)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def with_colors(self, colors: np.ndarray) -> "PointCloud":
        return PointCloud(self.positions, colors, self.id)


def uncolored(positions: np.ndarray, id: str = "", fill: float = 0.4) -> PointCloud:
    """Cloud without color information; channels padded with a constant."""
    positions = np.asarray(positions, dtype=np.float64)
    return PointCloud(positions, np.full_like(positions, fill), id)


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale so the farthest point has norm 1."""
    pos = cloud.positions
    if not np.all(np.isfinite(pos)):
        raise ValueError(f"cloud {cloud.id!r} has non-finite coordinates")
    centered = pos - pos.mean(axis=0)
    radius = np.sqrt((centered ** 2).sum(axis=1)).max()
    if radius > 0.0:
        centered = centered / radius
    else:
        centered = np.zeros_like(centered)
    return PointCloud(centered, cloud.colors, cloud.id)


def _check_positions(positions: np.ndarray) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise ValueError(f"expected an N x 3 array, got shape {positions.shape}")
    return positions


def farthest_point_sample(positions: np.ndarray, count: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling.

    Each new index maximizes the minimum distance to the points already chosen;
    ties go to the smallest index. Returns ``count`` distinct indices starting
    with ``start_index``.
    """
    positions = _check_positions(positions)
    n = positions.shape[0]
    if not 1 <= count <= n:
        raise ValueError(f"count must be in [1, {n}], got {count}")
    if not 0 <= start_index < n:
        raise ValueError(f"start_index must be in [0, {n}), got {start_index}")

    selected = np.empty(count, dtype=np.int64)
    selected[0] = start_index
    # squared distances give the same argmax as distances
    min_d2 = ((positions - positions[start_index]) ** 2).sum(axis=1)
    min_d2[start_index] = -1.0
    for i in range(1, count):
        nxt = int(np.argmax(min_d2))  # first occurrence -> smallest index
        selected[i] = nxt
        d2 = ((positions - positions[nxt]) ** 2).sum(axis=1)
        np.minimum(min_d2, d2, out=min_d2)
        min_d2[selected[: i + 1]] = -1.0
    return selected


def knn(positions: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Exhaustive k-nearest-neighbor search.

    Rows are sorted by ascending distance with ties broken by smallest index.
    """
    positions = _check_positions(positions)
    queries = _check_positions(queries)
    n = positions.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    d2 = ((queries[:, None, :] - positions[None, :, :]) ** 2).sum(axis=2)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]
