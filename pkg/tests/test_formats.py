import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from puncto.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from puncto.synthetic import make_triplet_dataset, random_unit
from puncto.teachercache import (CacheError, EmbeddingCache, Manifest, ShapeRecord, load_caches, load_manifest,
                                 parse_ref, read_cache, sample_batch, save_manifest, write_cache)

names = st.text(st.characters(min_codepoint=33, max_codepoint=0x2FFF, exclude_characters='"\\'), min_size=1,
                max_size=12)
shapes = st.lists(st.integers(1, 4), min_size=0, max_size=3)


@given(st.dictionaries(names, shapes, min_size=1, max_size=5), st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_checkpoint_round_trip(tmp_path_factory, layout, seed):
    rng = np.random.default_rng(seed)
    tensors = {n: rng.standard_normal(s).astype(np.float32) for n, s in layout.items()}
    d = tmp_path_factory.mktemp("ck")
    save_checkpoint(d / "a.u3dc", tensors, {"note": "x", "n": 3})
    back, meta = load_checkpoint(d / "a.u3dc")
    assert meta == {"note": "x", "n": 3}
    assert list(back) == list(tensors)
    for n in tensors:
        assert back[n].shape == tensors[n].shape
        assert back[n].tobytes() == tensors[n].tobytes()
    save_checkpoint(d / "b.u3dc", back, meta)
    assert (d / "a.u3dc").read_bytes() == (d / "b.u3dc").read_bytes()


def test_checkpoint_errors(tmp_path):
    save_checkpoint(tmp_path / "ok.u3dc", {"w": np.ones((2, 3))})
    data = (tmp_path / "ok.u3dc").read_bytes()
    cases = {"magic": b"XXXX" + data[4:], "version": data[:4] + struct.pack("<I", 9) + data[8:],
             "past end": data[:-4], "truncated": data[:6]}
    for what, blob in cases.items():
        (tmp_path / "bad.u3dc").write_bytes(blob)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.u3dc")


def test_cache_three_records(tmp_path):
    vecs = np.arange(12, dtype=np.float32).reshape(3, 4) / 7
    cache = EmbeddingCache(4, ["a", "bé", "c/1"], vecs, "t")
    write_cache(tmp_path / "c.u3de", cache)
    back = read_cache(tmp_path / "c.u3de")
    assert back.ids == ["a", "bé", "c/1"]
    assert back.vectors.tobytes() == vecs.tobytes()
    assert back.source_tag == "c"


def test_cache_file_size(tmp_path):
    rng = np.random.default_rng(0)
    ids = [f"obj{i:05d}/view{i % 7}" for i in range(10_000)]
    cache = EmbeddingCache(512, ids, rng.standard_normal((10_000, 512)).astype(np.float32))
    write_cache(tmp_path / "big.u3de", cache)
    expected = 20 + sum(2 + len(i.encode()) for i in ids) + 10_000 * 512 * 4
    assert (tmp_path / "big.u3de").stat().st_size == expected


@given(st.lists(names, min_size=1, max_size=8, unique=True), st.integers(1, 6))
@settings(max_examples=40, deadline=None)
def test_cache_round_trip_bytes(tmp_path_factory, ids, dim):
    d = tmp_path_factory.mktemp("u3de")
    vecs = random_unit(np.random.default_rng(len(ids)), len(ids), dim)
    write_cache(d / "a.u3de", EmbeddingCache(dim, ids, vecs))
    write_cache(d / "b.u3de", read_cache(d / "a.u3de"))
    assert (d / "a.u3de").read_bytes() == (d / "b.u3de").read_bytes()


def test_cache_count_mismatch(tmp_path):
    write_cache(tmp_path / "c.u3de", EmbeddingCache(2, ["a", "b"], np.ones((2, 2))))
    data = bytearray((tmp_path / "c.u3de").read_bytes())
    for count in (3, 1):
        data[12:20] = struct.pack("<Q", count)
        (tmp_path / "bad.u3de").write_bytes(bytes(data))
        with pytest.raises(CacheError):
            read_cache(tmp_path / "bad.u3de")


def test_cache_rejects_duplicates_and_nan():
    with pytest.raises(CacheError):
        EmbeddingCache(2, ["a", "a"], np.ones((2, 2)))
    with pytest.raises(CacheError):
        EmbeddingCache(2, ["a"], np.array([[np.nan, 1.0]]))


def test_parse_ref():
    assert parse_ref("shape/0@/tmp/x@y/t.u3de") == ("shape/0@/tmp/x", "y/t.u3de")
    with pytest.raises(ValueError):
        parse_ref("noref")


def test_manifest_round_trip_and_validation(tmp_path):
    path = make_triplet_dataset(tmp_path, num_shapes=3, num_points=64, dim=8, images_per_shape=2)
    m = load_manifest(path)
    assert [s.id for s in m.shapes] == ["shape0000", "shape0001", "shape0002"]
    save_manifest(tmp_path / "copy.json", m)
    assert load_manifest(tmp_path / "copy.json").shapes == m.shapes
    images, texts = load_caches(m)
    assert images.dim == texts.dim == 8

    broken = Manifest([ShapeRecord("x", "clouds/shape0000.ply", ("nope",), ("shape0000/txt0",))],
                      m.image_cache, m.text_cache, m.root)
    with pytest.raises(CacheError, match="nope"):
        load_caches(broken)


def single_shape(tmp_path, num_images=1):
    path = make_triplet_dataset(tmp_path, num_shapes=1, num_points=64, dim=8, images_per_shape=num_images)
    m = load_manifest(path)
    return m, load_caches(m)


def test_single_triplet_every_step(tmp_path):
    m, caches = single_shape(tmp_path)
    for step in range(5):
        b = sample_batch(m, caches, 1, seed=3, step=step)
        assert b.ids == ["shape0000"]
        assert b.image_ids == ["shape0000/img0"] and b.text_ids == ["shape0000/txt0"]


def test_same_seed_step_same_batch(tmp_path):
    path = make_triplet_dataset(tmp_path, num_shapes=10, num_points=64, dim=8, images_per_shape=3)
    m = load_manifest(path)
    caches = load_caches(m)
    a = sample_batch(m, caches, 4, seed=1, step=7)
    b = sample_batch(m, caches, 4, seed=1, step=7)
    assert a.ids == b.ids and a.image_ids == b.image_ids
    assert np.array_equal(a.images, b.images)
    epoch = [i for step in range(3) for i in sample_batch(m, caches, 4, seed=1, step=step).ids]
    assert sorted(epoch) == sorted(s.id for s in m.shapes)


def test_image_draw_frequencies(tmp_path):
    m, caches = single_shape(tmp_path, num_images=10)
    counts = np.zeros(10)
    for step in range(10_000):
        rid = sample_batch(m, caches, 1, seed=0, step=step, clouds={"shape0000": None}).image_ids[0]
        counts[int(rid.rsplit("img", 1)[1])] += 1
    freq = counts / counts.sum()
    assert np.all(np.abs(freq - 0.1) <= 0.02)
    chi2 = ((counts - 1000) ** 2 / 1000).sum()
    assert chi2 < 27.9  # 99.9th percentile, 9 dof
