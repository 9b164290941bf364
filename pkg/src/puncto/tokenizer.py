"""Patch tokenizer: FPS centers, kNN neighborhoods and a tiny shared PointNet."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .geometry import PointCloud, farthest_point_sample, knn


@dataclass(frozen=True)
class PatchSet:
    """G patches of K points each; member 0 of every patch is its center."""

    centers: np.ndarray
    local_coords: np.ndarray
    local_colors: np.ndarray
    center_indices: np.ndarray
    member_indices: np.ndarray = field(repr=False)

    @property
    def num_patches(self) -> int:
        return self.centers.shape[0]

    @property
    def patch_size(self) -> int:
        return self.local_coords.shape[1]

    def permuted(self, order: Sequence[int]) -> "PatchSet":
        order = np.asarray(order)
        return PatchSet(
            self.centers[order],
            self.local_coords[order],
            self.local_colors[order],
            self.center_indices[order],
            self.member_indices[order],
        )


def group_patches(cloud: PointCloud, num_groups: int, group_size: int, start_index: int = 0) -> PatchSet:
    """FPS centers plus kNN neighborhoods, coordinates recentred on each center."""
    n = len(cloud)
    if num_groups > n or group_size > n:
        raise ValueError(f"cannot form {num_groups} groups of {group_size} from a cloud of {n} points")
    center_idx = farthest_point_sample(cloud.positions, num_groups, start_index)
    centers = cloud.positions[center_idx]
    members = knn(cloud.positions, centers, group_size)
    return PatchSet(
        centers=centers,
        local_coords=cloud.positions[members] - centers[:, None, :],
        local_colors=cloud.colors[members],
        center_indices=center_idx,
        member_indices=members,
    )


class PointTokenizer(nn.Module):
    """Shared two-stage per-point MLP with max-pooling, PointBERT style.

    Stage 1 maps each (xyz, rgb) point to ``hidden`` features; the patch-wise
    max is concatenated back onto every point before stage 2, whose output is
    max-pooled again into one token per patch.
    """

    def __init__(self, width: int, hidden: int = 128, out: int = 256):
        super().__init__()
        self.stage1 = nn.Sequential(nn.Linear(6, hidden), nn.GELU(), nn.Linear(hidden, hidden))
        self.stage2 = nn.Sequential(nn.Linear(2 * hidden, out), nn.GELU(), nn.Linear(out, width))

    def forward(self, local_coords: torch.Tensor, local_colors: torch.Tensor) -> torch.Tensor:
        # (..., G, K, 3) x2 -> (..., G, width)
        x = torch.cat([local_coords, local_colors], dim=-1)
        f = self.stage1(x)
        pooled = f.max(dim=-2, keepdim=True).values.expand_as(f)
        f = self.stage2(torch.cat([pooled, f], dim=-1))
        return f.max(dim=-2).values


class PositionalEmbedding(nn.Module):
    def __init__(self, width: int, hidden: int = 128):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(3, hidden), nn.GELU(), nn.Linear(hidden, width))

    def forward(self, centers: torch.Tensor) -> torch.Tensor:
        return self.mlp(centers)


def _as_tensor(a, like: nn.Module) -> torch.Tensor:
    p = next(like.parameters())
    return torch.as_tensor(np.asarray(a), dtype=p.dtype, device=p.device)


def embed_patches(patches: PatchSet, tokenizer: PointTokenizer) -> torch.Tensor:
    """G x width token matrix for one patch set."""
    if patches.local_coords.shape[-1] != 3 or patches.local_colors.shape != patches.local_coords.shape:
        raise ValueError("patch coordinates and colors must both be G x K x 3")
    return tokenizer(_as_tensor(patches.local_coords, tokenizer), _as_tensor(patches.local_colors, tokenizer))


def positional_embed(centers: np.ndarray, pos: PositionalEmbedding) -> torch.Tensor:
    centers = np.asarray(centers)
    if centers.ndim != 2 or centers.shape[1] != 3:
        raise ValueError(f"centers must be G x 3, got {centers.shape}")
    return pos(_as_tensor(centers, pos))


def stack_patches(patch_sets: Sequence[PatchSet], dtype=torch.float32):
    """Collate equally-shaped patch sets into (coords, colors, centers) tensors."""
    coords = torch.as_tensor(np.stack([p.local_coords for p in patch_sets]), dtype=dtype)
    colors = torch.as_tensor(np.stack([p.local_colors for p in patch_sets]), dtype=dtype)
    centers = torch.as_tensor(np.stack([p.centers for p in patch_sets]), dtype=dtype)
    return coords, colors, centers
