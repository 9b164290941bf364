import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from puncto.geometry import PointCloud, farthest_point_sample, knn, normalize_unit_sphere, uncolored
from puncto.synthetic import random_rotation

coords = st.floats(-100, 100, allow_nan=False, allow_infinity=False, width=32)


def clouds(min_n=1, max_n=48):
    return st.integers(min_n, max_n).flatmap(lambda n: arrays(np.float64, (n, 3), elements=coords))


def oracle_fps(pts, count, start):
    chosen = [start]
    while len(chosen) < count:
        d = np.array([min(((p - pts[j]) ** 2).sum() for j in chosen) for p in pts])
        d[chosen] = -1
        chosen.append(int(np.flatnonzero(d == d.max())[0]))
    return chosen


def test_normalize_examples():
    one = normalize_unit_sphere(uncolored(np.array([[5.0, 5, 5]])))
    assert one.positions.tolist() == [[0.0, 0.0, 0.0]]
    two = normalize_unit_sphere(uncolored(np.array([[0.0, 0, 0], [2, 0, 0]])))
    assert two.positions.tolist() == [[-1.0, 0, 0], [1.0, 0, 0]]


def test_normalize_random_cloud():
    rng = np.random.default_rng(0)
    c = normalize_unit_sphere(PointCloud(rng.standard_normal((100, 3)) * 4 + 3, rng.uniform(size=(100, 3))))
    assert np.linalg.norm(c.positions.mean(axis=0)) < 1e-6
    assert abs(np.linalg.norm(c.positions, axis=1).max() - 1.0) < 1e-6


def test_normalize_keeps_colors_and_handles_coincident():
    cols = np.array([[0.1, 0.2, 0.3]] * 4)
    c = normalize_unit_sphere(PointCloud(np.ones((4, 3)), cols))
    assert np.array_equal(c.positions, np.zeros((4, 3)))
    assert np.array_equal(c.colors, cols)


@given(clouds(2))
@settings(max_examples=60, deadline=None)
def test_normalize_properties(pts):
    c = normalize_unit_sphere(uncolored(pts))
    r = np.linalg.norm(c.positions, axis=1).max()
    assert np.isfinite(c.positions).all()
    assert r == 0.0 or abs(r - 1.0) < 1e-9


def test_pointcloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), np.full((3, 3), 1.5))
    with pytest.raises(ValueError):
        PointCloud(np.array([[np.nan, 0, 0]]), np.zeros((1, 3)))


def test_fps_square():
    sq = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
    assert farthest_point_sample(sq, 2, 0).tolist() == [0, 3]


def test_fps_random_matches_oracle():
    pts = np.random.default_rng(1).standard_normal((64, 3))
    assert farthest_point_sample(pts, 16, 0).tolist() == oracle_fps(pts, 16, 0)


@given(clouds(), st.data())
@settings(max_examples=80, deadline=None)
def test_fps_properties(pts, data):
    n = len(pts)
    count = data.draw(st.integers(1, n))
    start = data.draw(st.integers(0, n - 1))
    idx = farthest_point_sample(pts, count, start)
    assert idx[0] == start
    assert len(set(idx.tolist())) == count
    assert idx.tolist() == oracle_fps(pts, count, start)
    if count == n:
        assert sorted(idx.tolist()) == list(range(n))


def test_fps_rejects_bad_count():
    with pytest.raises(ValueError):
        farthest_point_sample(np.zeros((3, 3)), 4)
    with pytest.raises(ValueError):
        farthest_point_sample(np.zeros((3, 3)), 0)


def test_knn_examples():
    pts = np.random.default_rng(2).standard_normal((20, 3))
    assert knn(pts, pts[7:8], 1).tolist() == [[7]]
    line = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    assert knn(line, np.array([[0.9, 0, 0]]), 2).tolist() == [[1, 0]]


def test_knn_matches_exhaustive_scan():
    rng = np.random.default_rng(3)
    pts, q = rng.standard_normal((200, 3)), rng.standard_normal((10, 3))
    got = knn(pts, q, 8)
    for row, query in zip(got, q):
        d = [(((p - query) ** 2).sum(), i) for i, p in enumerate(pts)]
        assert row.tolist() == [i for _, i in sorted(d)[:8]]


@given(clouds(), st.data())
@settings(max_examples=60, deadline=None)
def test_knn_sorted_and_tie_stable(pts, data):
    k = data.draw(st.integers(1, len(pts)))
    q = pts[:3]
    idx = knn(pts, q, k)
    for row, query in zip(idx, q):
        d = ((pts[row] - query) ** 2).sum(axis=1)
        assert np.all(np.diff(d) >= 0)
        assert len(set(row.tolist())) == k
        # ties resolved by ascending index
        for a, b, da, db in zip(row[:-1], row[1:], d[:-1], d[1:]):
            if da == db:
                assert a < b


def test_fps_rotation_equivariant():
    rng = np.random.default_rng(4)
    pts = rng.standard_normal((50, 3))
    rot = random_rotation(rng)
    assert farthest_point_sample(pts, 12, 3).tolist() == farthest_point_sample(pts @ rot.T, 12, 3).tolist()
