"""Open-vocabulary part segmentation on top of a frozen encoder.

Token features from three depths are upsampled to every point by
inverse-distance feature propagation, fused by a small head and scored by
cosine against part-name text embeddings.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoder import Encoder
from .geometry import PointCloud, knn, normalize_unit_sphere
from .ply import read_ply, write_ply
from .tokenizer import group_patches

TAU_SEG = 0.07


def propagation_weights(source_pts: np.ndarray, target_pts: np.ndarray, k: int = 3):
    """Indices (N, k) and inverse-distance weights (N, k) of the k nearest sources.

    A target within 1e-10 of a source copies that source exactly.
    """
    source_pts = np.asarray(source_pts, dtype=np.float64)
    target_pts = np.asarray(target_pts, dtype=np.float64)
    if k > source_pts.shape[0]:
        raise ValueError(f"k={k} exceeds the {source_pts.shape[0]} available sources")
    idx = knn(source_pts, target_pts, k)
    d = np.sqrt(((target_pts[:, None, :] - source_pts[idx]) ** 2).sum(axis=2))
    coincident = d < 1e-10
    inv = 1.0 / np.where(coincident, 1.0, d)
    w = inv / inv.sum(axis=1, keepdims=True)
    hit = coincident.any(axis=1)
    if hit.any():
        first = np.argmax(coincident[hit], axis=1)
        w[hit] = 0.0
        w[np.flatnonzero(hit), first] = 1.0
    return idx, w


def feature_propagate(source_pts, source_feats, target_pts, k: int = 3):
    """Interpolate per-source features onto target points (numpy or torch features)."""
    idx, w = propagation_weights(source_pts, target_pts, k)
    if isinstance(source_feats, torch.Tensor):
        wt = torch.as_tensor(w, dtype=source_feats.dtype)
        return (source_feats[torch.as_tensor(idx)] * wt[..., None]).sum(dim=1)
    feats = np.asarray(source_feats)
    return (feats[idx] * w[..., None]).sum(axis=1)


def tap_layers(depth: int) -> list[int]:
    """The 1/3, 2/3 and final block indices (4, 8, 12 at depth 12)."""
    return [math.ceil(depth / 3), math.ceil(2 * depth / 3), depth]


class SegHead(nn.Module):
    def __init__(self, width: int, teacher_dim: int, hidden: int = 256, num_taps: int = 3, seed: int = 0):
        super().__init__()
        self.props = nn.ModuleList(nn.Linear(width, hidden) for _ in range(num_taps))
        self.fuse1 = nn.Linear(num_taps * hidden, hidden)
        self.fuse2 = nn.Linear(hidden, teacher_dim)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Linear):
                    nn.init.trunc_normal_(m.weight, std=m.in_features ** -0.5, generator=g)
                    m.bias.zero_()

    def forward(self, tap_feats: Sequence[torch.Tensor]) -> torch.Tensor:
        h = torch.cat([F.gelu(p(f)) for p, f in zip(self.props, tap_feats)], dim=-1)
        return self.fuse2(F.gelu(self.fuse1(h)))


@dataclass
class PartLabelSet:
    """Text embedding per (category, part name)."""

    parts: dict[str, dict[str, np.ndarray]]

    def __post_init__(self):
        for cat, names in self.parts.items():
            if len(names) < 2:
                raise ValueError(f"category {cat!r} needs at least two parts")
            for name, v in names.items():
                v = np.asarray(v, dtype=np.float64)
                self.parts[cat][name] = v / np.linalg.norm(v)

    def vectors(self, category: str, part_names: Sequence[str]) -> np.ndarray:
        try:
            return np.stack([self.parts[category][n] for n in part_names])
        except KeyError as e:
            raise KeyError(f"no text embedding for part {e.args[0]!r} of category {category!r}") from None


@dataclass
class LabeledCloud:
    cloud: PointCloud
    category: str
    part_ids: np.ndarray
    part_names: list[str]

    @property
    def id(self) -> str:
        return self.cloud.id


@torch.no_grad()
def point_features(encoder: Encoder, cloud: PointCloud, num_groups: int, group_size: int) -> list[torch.Tensor]:
    """Tap-layer token features propagated to every point (backbone frozen)."""
    encoder.eval()
    cloud = normalize_unit_sphere(cloud)
    patches = group_patches(cloud, num_groups, group_size, 0)
    layers = tap_layers(encoder.config.depth)
    out = encoder.forward_patches(patches, tap_layers=layers)
    return [feature_propagate(patches.centers, out.features[l], cloud.positions) for l in layers]


def head_logits(head: SegHead, feats: Sequence[torch.Tensor], part_vectors: np.ndarray) -> torch.Tensor:
    emb = head(feats)
    norm = emb.norm(dim=-1, keepdim=True)
    emb = emb / torch.where(norm > 0, norm, torch.ones_like(norm))
    text = torch.as_tensor(part_vectors, dtype=emb.dtype)
    return emb @ text.T / TAU_SEG


def partseg_forward(encoder: Encoder, head: SegHead, cloud: PointCloud, part_vectors: np.ndarray,
                    num_groups: int = 64, group_size: int = 32) -> torch.Tensor:
    """N x num_parts logits (cosine / tau) for one cloud."""
    return head_logits(head, point_features(encoder, cloud, num_groups, group_size), part_vectors)


def tensor_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for n, p in module.state_dict().items():
        h.update(n.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class PartSegTrainer:
    """Adam on the head only; backbone features are computed once per cloud."""

    def __init__(self, encoder: Encoder, head: SegHead, labels: PartLabelSet, lr: float = 1e-3,
                 num_groups: int = 64, group_size: int = 32):
        self.encoder = encoder
        self.head = head
        self.labels = labels
        self.num_groups = num_groups
        self.group_size = group_size
        for p in encoder.parameters():
            p.requires_grad_(False)
        self.optimizer = torch.optim.Adam(head.parameters(), lr=lr, foreach=False)
        self._feats: dict[str, list[torch.Tensor]] = {}
        self.step_count = 0

    def features(self, sample: LabeledCloud) -> list[torch.Tensor]:
        if sample.id not in self._feats:
            self._feats[sample.id] = point_features(self.encoder, sample.cloud, self.num_groups, self.group_size)
        return self._feats[sample.id]

    def logits(self, sample: LabeledCloud) -> torch.Tensor:
        vecs = self.labels.vectors(sample.category, sample.part_names)
        return head_logits(self.head, self.features(sample), vecs)

    def step(self, batch: Sequence[LabeledCloud]) -> float:
        self.head.train()
        self.optimizer.zero_grad(set_to_none=True)
        losses = [F.cross_entropy(self.logits(s), torch.as_tensor(s.part_ids, dtype=torch.long)) for s in batch]
        loss = sum(losses) / len(losses)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite part-seg loss at step {self.step_count}")
        loss.backward()
        self.optimizer.step()
        self.step_count += 1
        return float(loss.detach())

    @torch.no_grad()
    def predict(self, sample: LabeledCloud) -> np.ndarray:
        self.head.eval()
        return self.logits(sample).argmax(dim=1).numpy()


def partseg_train_step(trainer: PartSegTrainer, batch: Sequence[LabeledCloud]) -> float:
    return trainer.step(batch)


def shape_iou(pred: np.ndarray, true: np.ndarray) -> float:
    """Mean IoU over the parts present in either prediction or ground truth."""
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError("prediction and ground truth must label the same points")
    ious = []
    for part in np.union1d(pred, true):
        p, t = pred == part, true == part
        ious.append((p & t).sum() / (p | t).sum())
    return float(np.mean(ious))


def miou_c(pred_parts: Sequence[np.ndarray], true_parts: Sequence[np.ndarray], categories: Sequence[str],
           unseen: Sequence[str] = ()) -> dict:
    """Category-averaged mIoU; separate means for seen and unseen categories."""
    per_cat: dict[str, list[float]] = {}
    for pred, true, cat in zip(pred_parts, true_parts, categories, strict=True):
        per_cat.setdefault(cat, []).append(shape_iou(pred, true))
    cat_miou = {c: float(np.mean(v)) for c, v in sorted(per_cat.items())}
    unseen = set(unseen)
    seen_vals = [v for c, v in cat_miou.items() if c not in unseen]
    unseen_vals = [v for c, v in cat_miou.items() if c in unseen]
    result = {
        "per_category": cat_miou,
        "mIoU_C": float(np.mean(seen_vals)) if seen_vals else None,
        "mIoU_C_unseen": float(np.mean(unseen_vals)) if unseen_vals else None,
        "mIoU_C_ALL": float(np.mean(list(cat_miou.values()))) if cat_miou else None,
    }
    return result


def read_labeled(ply_path: str | os.PathLike, sidecar: str | os.PathLike | None = None) -> LabeledCloud:
    """PLY plus a JSON sidecar {id, category, part_ids, part_names}."""
    ply_path = Path(ply_path)
    sidecar = Path(sidecar) if sidecar else ply_path.with_suffix(".json")
    with open(sidecar) as fh:
        meta = json.load(fh)
    cloud = read_ply(ply_path, id=meta.get("id", ply_path.stem))
    part_ids = np.asarray(meta["part_ids"], dtype=np.int64)
    if part_ids.shape != (len(cloud),):
        raise ValueError(f"{sidecar}: {part_ids.size} part ids for {len(cloud)} points")
    return LabeledCloud(cloud, meta["category"], part_ids, list(meta["part_names"]))


def write_labeled(ply_path: str | os.PathLike, sample: LabeledCloud) -> None:
    ply_path = Path(ply_path)
    write_ply(ply_path, sample.cloud)
    with open(ply_path.with_suffix(".json"), "w") as fh:
        json.dump({"id": sample.id, "category": sample.category,
                   "part_ids": [int(i) for i in sample.part_ids], "part_names": sample.part_names}, fh)


def write_prediction(ply_path: str | os.PathLike, cloud: PointCloud, parts: np.ndarray) -> None:
    write_ply(ply_path, cloud, extra={"part": np.asarray(parts, dtype=np.int32)})
