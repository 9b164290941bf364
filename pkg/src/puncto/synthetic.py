"""Synthetic clouds, teacher caches and manifests for tests and experiments."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .geometry import PointCloud, normalize_unit_sphere
from .ply import write_ply
from .teachercache import EmbeddingCache, Manifest, ShapeRecord, save_manifest, write_cache


def random_unit(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_blob(rng: np.random.Generator, num_points: int, id: str = "") -> PointCloud:
    """Anisotropic Gaussian blob with a per-shape base color."""
    axes = rng.uniform(0.2, 1.0, size=3)
    pos = rng.standard_normal((num_points, 3)) * axes @ random_rotation(rng).T
    base = rng.uniform(0.1, 0.9, size=3)
    colors = np.clip(base + 0.05 * rng.standard_normal((num_points, 3)), 0.0, 1.0)
    return normalize_unit_sphere(PointCloud(pos, colors, id))


def two_part_sphere(rng: np.random.Generator, num_points: int, id: str = "",
                    color=(0.6, 0.6, 0.6)) -> tuple[PointCloud, np.ndarray]:
    """Points on the unit sphere labelled 0 above the equator, 1 below."""
    pos = rng.standard_normal((num_points, 3))
    pos /= np.linalg.norm(pos, axis=1, keepdims=True)
    labels = (pos[:, 2] < 0).astype(np.int64)
    colors = np.broadcast_to(np.asarray(color, dtype=float), pos.shape).copy()
    return PointCloud(pos, colors, id), labels


def two_part_box(rng: np.random.Generator, num_points: int, id: str = "") -> tuple[PointCloud, np.ndarray]:
    """Points on an elongated box surface labelled by the sign of x."""
    half = np.array([1.0, 0.4, 0.3])
    face = rng.integers(0, 3, size=num_points)
    pos = rng.uniform(-1, 1, size=(num_points, 3)) * half
    sign = rng.choice([-1.0, 1.0], size=num_points)
    pos[np.arange(num_points), face] = sign * half[face]
    labels = (pos[:, 0] < 0).astype(np.int64)
    return normalize_unit_sphere(PointCloud(pos, np.full_like(pos, 0.5), id)), labels


def make_triplet_dataset(
    out_dir: str | os.PathLike,
    num_shapes: int = 32,
    num_points: int = 512,
    dim: int = 64,
    seed: int = 0,
    images_per_shape: int = 1,
    texts_per_shape: int = 1,
) -> Path:
    """Write blobs as PLY, random unit teacher vectors as U3DE caches and a manifest.

    Returns the manifest path.
    """
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    shapes, image_recs, text_recs = [], {}, {}
    for i in range(num_shapes):
        sid = f"shape{i:04d}"
        write_ply(out / "clouds" / f"{sid}.ply", random_blob(rng, num_points, sid))
        imgs = [f"{sid}/img{j}" for j in range(images_per_shape)]
        txts = [f"{sid}/txt{j}" for j in range(texts_per_shape)]
        image_recs.update(zip(imgs, random_unit(rng, images_per_shape, dim)))
        text_recs.update(zip(txts, random_unit(rng, texts_per_shape, dim)))
        shapes.append(ShapeRecord(sid, f"clouds/{sid}.ply", tuple(imgs), tuple(txts)))
    write_cache(out / "images.u3de", EmbeddingCache.from_mapping(image_recs, "synthetic-image"))
    write_cache(out / "texts.u3de", EmbeddingCache.from_mapping(text_recs, "synthetic-text"))
    path = out / "manifest.json"
    save_manifest(path, Manifest(shapes, "images.u3de", "texts.u3de", str(out)))
    return path


def make_partseg_dataset(
    out_dir: str | os.PathLike,
    num_train: int = 1,
    num_eval: int = 8,
    num_unseen: int = 4,
    num_points: int = 1024,
    dim: int = 64,
    seed: int = 0,
) -> dict:
    """Two-part spheres (seen) and two-part boxes (unseen) with random part text vectors.

    Writes labelled PLYs with JSON sidecars, a ``parts.u3de`` text cache and a
    ``parts.json`` label file. Returns the written paths.
    """
    from .partseg import LabeledCloud, write_labeled

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = {"sphere": ["top", "bottom"], "box": ["left", "right"]}
    vecs = random_unit(rng, 4, dim)
    text = {f"{cat}/{p}": vecs[2 * i + j] for i, cat in enumerate(names) for j, p in enumerate(names[cat])}
    write_cache(out / "parts.u3de", EmbeddingCache.from_mapping(text, "synthetic-part-text"))
    with open(out / "parts.json", "w") as fh:
        json.dump({"text_cache": "parts.u3de",
                   "categories": {c: {p: f"{c}/{p}" for p in ps} for c, ps in names.items()}}, fh, indent=1)

    def emit(kind, count, make, cat):
        paths = []
        for i in range(count):
            cloud, labels = make(rng, num_points, f"{kind}{i:03d}")
            p = out / f"{kind}{i:03d}.ply"
            write_labeled(p, LabeledCloud(cloud, cat, labels, names[cat]))
            paths.append(str(p))
        return paths

    return {
        "parts": str(out / "parts.json"),
        "train": emit("train", num_train, two_part_sphere, "sphere"),
        "eval": emit("eval", num_eval, two_part_sphere, "sphere"),
        "unseen": emit("unseen", num_unseen, two_part_box, "box"),
    }
