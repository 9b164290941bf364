"""Precached frozen teacher embeddings, the triplet manifest and batch sampling.

U3DE cache layout: magic ``U3DE``, u32 version, u32 dim, u64 count, then per
record a u16 id byte length, the UTF-8 id, and ``dim`` little-endian f32.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geometry import PointCloud, normalize_unit_sphere
from .ply import read_ply

MAGIC = b"U3DE"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


class CacheError(ValueError):
    pass


@dataclass
class EmbeddingCache:
    dim: int
    ids: list[str]
    vectors: np.ndarray
    source_tag: str = ""
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32).reshape(len(self.ids), self.dim)
        self._index = {}
        for i, rid in enumerate(self.ids):
            if rid in self._index:
                raise CacheError(f"duplicate id {rid!r} in embedding cache")
            self._index[rid] = i
        if not np.all(np.isfinite(self.vectors)):
            raise CacheError("embedding cache contains non-finite values")

    @classmethod
    def from_mapping(cls, records: Mapping[str, Sequence[float]], source_tag: str = "") -> "EmbeddingCache":
        ids = list(records)
        vectors = np.stack([np.asarray(records[i], dtype=np.float32) for i in ids])
        return cls(vectors.shape[1], ids, vectors, source_tag)

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, rid: str) -> bool:
        return rid in self._index

    def __getitem__(self, rid: str) -> np.ndarray:
        try:
            return self.vectors[self._index[rid]]
        except KeyError:
            raise KeyError(f"id {rid!r} not in embedding cache") from None

    def get_many(self, ids: Sequence[str]) -> np.ndarray:
        return self.vectors[[self._index[i] for i in ids]]


def write_cache(path: str | os.PathLike, cache: EmbeddingCache) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, cache.dim, len(cache)))
        vecs = cache.vectors.astype("<f4", copy=False)
        for rid, vec in zip(cache.ids, vecs):
            raw = rid.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise CacheError(f"id {rid[:32]!r}... exceeds 65535 bytes")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(vec.tobytes())


def read_cache(path: str | os.PathLike, source_tag: str = "") -> EmbeddingCache:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise CacheError(f"{path}: truncated cache header")
    magic, version, dim, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CacheError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CacheError(f"{path}: unsupported version {version}")
    if dim < 1:
        raise CacheError(f"{path}: invalid dim {dim}")
    pos = _HEADER.size
    ids = []
    vectors = np.empty((count, dim), dtype=np.float32)
    nbytes = 4 * dim
    for i in range(count):
        if pos + 2 > len(data):
            raise CacheError(f"{path}: file ends after {i} of {count} records")
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + n + nbytes > len(data):
            raise CacheError(f"{path}: file ends after {i} of {count} records")
        ids.append(data[pos:pos + n].decode("utf-8"))
        pos += n
        vectors[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=pos)
        pos += nbytes
    if pos != len(data):
        raise CacheError(f"{path}: {len(data) - pos} trailing bytes beyond declared count {count}")
    return EmbeddingCache(dim, ids, vectors, source_tag or Path(path).stem)


def parse_ref(ref: str) -> tuple[str, str]:
    """Split an ``id@cache_path`` reference."""
    rid, sep, path = ref.rpartition("@")
    if not sep or not rid or not path:
        raise ValueError(f"expected 'id@cache_path', got {ref!r}")
    return rid, path


@dataclass(frozen=True)
class ShapeRecord:
    id: str
    cloud: str
    images: tuple[str, ...]
    texts: tuple[str, ...]


@dataclass
class Manifest:
    shapes: list[ShapeRecord]
    image_cache: str
    text_cache: str
    root: str = "."

    def resolve(self, p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(self.root, p)

    def __len__(self) -> int:
        return len(self.shapes)


def load_manifest(path: str | os.PathLike) -> Manifest:
    with open(path) as fh:
        raw = json.load(fh)
    shapes = []
    seen = set()
    for i, rec in enumerate(raw.get("shapes", [])):
        missing = {"id", "cloud", "images", "texts"} - set(rec)
        if missing:
            raise ValueError(f"shapes[{i}] is missing {sorted(missing)}")
        if rec["id"] in seen:
            raise ValueError(f"shapes[{i}]: duplicate shape id {rec['id']!r}")
        seen.add(rec["id"])
        if not rec["images"] or not rec["texts"]:
            raise ValueError(f"shapes[{i}] ({rec['id']}) needs at least one image and one text")
        shapes.append(ShapeRecord(rec["id"], rec["cloud"], tuple(rec["images"]), tuple(rec["texts"])))
    for key in ("image_cache", "text_cache"):
        if key not in raw:
            raise ValueError(f"manifest is missing {key!r}")
    return Manifest(shapes, raw["image_cache"], raw["text_cache"], str(Path(path).parent))


def save_manifest(path: str | os.PathLike, manifest: Manifest) -> None:
    payload = {
        "image_cache": manifest.image_cache,
        "text_cache": manifest.text_cache,
        "shapes": [
            {"id": s.id, "cloud": s.cloud, "images": list(s.images), "texts": list(s.texts)}
            for s in manifest.shapes
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def load_caches(manifest: Manifest) -> tuple[EmbeddingCache, EmbeddingCache]:
    """Read both caches and check every manifest reference resolves."""
    images = read_cache(manifest.resolve(manifest.image_cache))
    texts = read_cache(manifest.resolve(manifest.text_cache))
    validate(manifest, images, texts)
    return images, texts


def validate(manifest: Manifest, images: EmbeddingCache, texts: EmbeddingCache) -> None:
    if images.dim != texts.dim:
        raise CacheError(f"image cache dim {images.dim} != text cache dim {texts.dim}")
    for s in manifest.shapes:
        for rid in s.images:
            if rid not in images:
                raise CacheError(f"shape {s.id!r} references missing image embedding {rid!r}")
        for rid in s.texts:
            if rid not in texts:
                raise CacheError(f"shape {s.id!r} references missing text embedding {rid!r}")


def load_clouds(manifest: Manifest) -> dict[str, PointCloud]:
    """Read and unit-sphere normalize every manifest cloud."""
    return {
        s.id: normalize_unit_sphere(read_ply(manifest.resolve(s.cloud), id=s.id))
        for s in manifest.shapes
    }


@dataclass
class TripletBatch:
    ids: list[str]
    clouds: list[PointCloud]
    images: np.ndarray
    texts: np.ndarray
    image_ids: list[str]
    text_ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)


def epoch_order(num_shapes: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(seed + epoch).permutation(num_shapes)


def sample_batch(
    manifest: Manifest,
    caches: tuple[EmbeddingCache, EmbeddingCache],
    batch_size: int,
    seed: int,
    step: int,
    clouds: Mapping[str, PointCloud] | None = None,
) -> TripletBatch:
    """Batch ``step`` of a seeded epoch-wise shuffle.

    Each epoch visits every shape once (last batch may be short); one image
    and one text id are drawn uniformly per shape. Fully determined by
    (seed, step).
    """
    if len(manifest) == 0:
        raise ValueError("manifest is empty")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    images, texts = caches
    m = len(manifest)
    per_epoch = math.ceil(m / batch_size)
    epoch, pos = divmod(step, per_epoch)
    order = epoch_order(m, seed, epoch)[pos * batch_size:(pos + 1) * batch_size]
    rng = np.random.default_rng([seed, step])
    shapes = [manifest.shapes[i] for i in order]
    image_ids = [s.images[rng.integers(len(s.images))] for s in shapes]
    text_ids = [s.texts[rng.integers(len(s.texts))] for s in shapes]
    if clouds is None:
        cloud_list = [normalize_unit_sphere(read_ply(manifest.resolve(s.cloud), id=s.id)) for s in shapes]
    else:
        cloud_list = [clouds[s.id] for s in shapes]
    return TripletBatch(
        ids=[s.id for s in shapes],
        clouds=cloud_list,
        images=images.get_many(image_ids),
        texts=texts.get_many(text_ids),
        image_ids=image_ids,
        text_ids=text_ids,
    )
