"""Exact cosine retrieval over a persisted shape-embedding index."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import Encoder
from .evaluation import embed_shapes
from .ply import read_ply
from .teachercache import EmbeddingCache, Manifest, read_cache, write_cache

log = logging.getLogger(__name__)

INDEX_CACHE = "embeddings.u3de"
INDEX_META = "metadata.json"


@dataclass
class ShapeIndex:
    ids: list[str]
    embeddings: np.ndarray
    metadata: dict[str, str]

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("index ids must be unique")
        norms = np.linalg.norm(self.embeddings.astype(np.float64), axis=1)
        if self.embeddings.shape[0] and np.abs(norms - 1.0).max() > 1e-5:
            raise ValueError("index rows must be unit norm")

    def __len__(self) -> int:
        return len(self.ids)

    def save(self, directory: str | os.PathLike, report: dict | None = None) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_cache(d / INDEX_CACHE, EmbeddingCache(self.embeddings.shape[1], list(self.ids), self.embeddings,
                                                    "shape-index"))
        with open(d / INDEX_META, "w") as fh:
            json.dump({"clouds": self.metadata, "report": report or {}}, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "ShapeIndex":
        d = Path(directory)
        cache = read_cache(d / INDEX_CACHE)
        with open(d / INDEX_META) as fh:
            meta = json.load(fh)
        return cls(cache.ids, cache.vectors, meta.get("clouds", {}))


def build_index(encoder: Encoder, manifest: Manifest, num_groups: int = 64, group_size: int = 32):
    """Embed every readable manifest cloud. Returns (index, report)."""
    ids, clouds, meta, skipped = [], [], {}, []
    for s in manifest.shapes:
        path = manifest.resolve(s.cloud)
        try:
            cloud = read_ply(path, id=s.id)
        except (OSError, ValueError) as e:
            log.warning("skipping %s: %s", s.id, e)
            skipped.append({"id": s.id, "cloud": s.cloud, "error": str(e)})
            continue
        ids.append(s.id)
        clouds.append(cloud)
        meta[s.id] = s.cloud
    embs = embed_shapes(encoder, clouds, num_groups, group_size)
    if not ids:
        embs = np.zeros((0, encoder.config.teacher_dim))
    report = {"indexed": len(ids), "skipped": skipped}
    return ShapeIndex(ids, embs.astype(np.float32), meta), report


def retrieve(index: ShapeIndex, queries: Sequence[np.ndarray], k: int = 5) -> list[tuple[str, float]]:
    """Top-k by cosine against the renormalized mean of the queries."""
    if len(queries) == 0:
        raise ValueError("need at least one query")
    if not 1 <= k <= len(index):
        raise ValueError(f"k must be in [1, {len(index)}], got {k}")
    q = np.mean([np.asarray(v, dtype=np.float64) for v in queries], axis=0)
    norm = np.linalg.norm(q)
    if norm < 1e-12:
        raise ValueError("mean query vector is zero")
    scores = index.embeddings.astype(np.float64) @ (q / norm)
    order = np.argsort(-scores, kind="stable")[:k]
    return [(index.ids[i], float(scores[i])) for i in order]
