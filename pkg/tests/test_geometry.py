import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mae3d import geometry as G
from oracles import chamfer_bruteforce, fps_bruteforce, knn_bruteforce


def random_cloud(seed, n):
    return np.random.default_rng(seed).normal(size=(n, 3))


# ---------------------------------------------------------------- normalize

def test_normalize_two_points():
    out = G.normalize_unit_sphere(np.array([[1.0, 0, 0], [3.0, 0, 0]]))
    np.testing.assert_array_equal(out, [[-1.0, 0, 0], [1.0, 0, 0]])


def test_normalize_fixed_point():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0]])
    np.testing.assert_array_equal(G.normalize_unit_sphere(pts), pts)


def test_normalize_random_cloud():
    pts = random_cloud(3, 1024) * 5 + 2
    out = G.normalize_unit_sphere(pts)
    norms = np.linalg.norm(out, axis=1)
    assert np.abs(out.mean(axis=0)).max() < 1e-6
    assert 1 - 1e-6 <= norms.max() <= 1 + 1e-12
    # geometry preserved up to translation and uniform scale
    ratio = np.linalg.norm(out[1] - out[0]) / np.linalg.norm(pts[1] - pts[0])
    ratio2 = np.linalg.norm(out[7] - out[3]) / np.linalg.norm(pts[7] - pts[3])
    assert ratio == pytest.approx(ratio2, rel=1e-12)


def test_normalize_keeps_label():
    pc = G.PointCloud([[0, 0, 0], [2.0, 0, 0]], label=3)
    out = G.normalize_unit_sphere(pc)
    assert out.label == 3


def test_normalize_degenerate():
    with pytest.raises(G.GeometryError, match="zero extent"):
        G.normalize_unit_sphere(np.ones((5, 3)))


def test_pointcloud_rejects_nonfinite():
    with pytest.raises(G.GeometryError):
        G.PointCloud([[0, np.nan, 0]])


# ---------------------------------------------------------------- fps

def test_fps_collinear():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]])
    assert sorted(G.fps(pts, 2, 0).tolist()) == [0, 3]


def test_fps_exhaustion_is_permutation():
    pts = random_cloud(0, 50)
    idx = G.fps(pts, 50)
    assert sorted(idx.tolist()) == list(range(50))


def test_fps_exhaustion_with_duplicates():
    pts = np.zeros((6, 3))
    pts[3] = 1.0
    assert sorted(G.fps(pts, 6).tolist()) == list(range(6))


def test_fps_64_random_matches_reference():
    pts = random_cloud(11, 64)
    assert G.fps(pts, 8, 0).tolist() == fps_bruteforce(pts, 8, 0)


def test_fps_errors():
    with pytest.raises(G.GeometryError):
        G.fps(random_cloud(0, 4), 5)
    with pytest.raises(G.GeometryError):
        G.fps(random_cloud(0, 4), 2, start_index=4)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 128), data=st.data())
def test_fps_matches_bruteforce(kernel_impl, seed, n, data):
    pts = np.ascontiguousarray(random_cloud(seed, n))
    s = data.draw(st.integers(1, min(n, 16)))
    start = data.draw(st.integers(0, n - 1))
    assert kernel_impl.fps(pts, s, start).tolist() == fps_bruteforce(pts, s, start)


def test_fps_grid_ties(kernel_impl):
    # integer lattice: many exactly tied distances
    g = np.stack(np.meshgrid(np.arange(4.0), np.arange(4.0), np.arange(2.0), indexing="ij"), -1)
    pts = np.ascontiguousarray(g.reshape(-1, 3))
    assert kernel_impl.fps(pts, 12, 5).tolist() == fps_bruteforce(pts, 12, 5)


# ---------------------------------------------------------------- knn

def test_knn_self_is_nearest():
    pts = random_cloud(1, 30)
    ps = G.knn_patchify(pts, [4, 9], 1)
    assert ps.patches.tolist() == [[4], [9]]


def test_knn_clusters():
    rng = np.random.default_rng(5)
    offsets = np.array([[0.0, 0, 0], [10.0, 0, 0], [0, 10.0, 0]])
    pts = np.concatenate([o + 0.1 * rng.normal(size=(4, 3)) for o in offsets])
    ps = G.knn_patchify(pts, [0, 4, 8], 4)
    for i, c in enumerate([0, 4, 8]):
        assert sorted(ps.patches[i].tolist()) == sorted(knn_bruteforce(pts, pts[c], 4))
        assert sorted(ps.patches[i].tolist()) == list(range(4 * i, 4 * i + 4))


def _coverages():
    from mae3d.data import synth_dataset

    clouds, _ = synth_dataset(["sphere", "cube", "torus"], 2, 2048, rng=0)
    out = []
    for c in clouds:
        pts = G.normalize_unit_sphere(c.points)
        ps = G.knn_patchify(pts, G.fps(pts, 32), 64)
        assert ps.patches.shape == (32, 64)
        out.append(ps.coverage(2048))
    return out


def test_knn_coverage_2048():
    # exact 64-NN patches around 32 FPS centers overlap; measured union is ~0.85
    assert min(_coverages()) >= 0.80


@pytest.mark.xfail(strict=True, reason="exact KNN with S*K == N overlaps; 95% union is geometrically unreachable")
def test_knn_coverage_2048_95():
    assert min(_coverages()) >= 0.95


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 128), data=st.data())
def test_knn_matches_bruteforce(kernel_impl, seed, n, data):
    pts = np.ascontiguousarray(random_cloud(seed, n))
    k = data.draw(st.integers(1, n))
    q = np.ascontiguousarray(pts[: min(3, n)] + 0.01)
    out = kernel_impl.knn(pts, q, k)
    for row, query in zip(out, q):
        assert row.tolist() == knn_bruteforce(pts, query, k)


def test_knn_ties_lower_index(kernel_impl):
    pts = np.ascontiguousarray([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, 0, 2.0], [0, -1.0, 0]])
    q = np.zeros((1, 3))
    assert kernel_impl.knn(pts, q, 3).tolist() == [[0, 1, 2]]


# ---------------------------------------------------------------- masking

def test_mask_random_zero_ratio():
    v, m = G.mask_random(32, 0.0, rng=1)
    assert m.size == 0 and v.tolist() == list(range(32))


def test_mask_random_counts():
    v, m = G.mask_random(32, 0.7, rng=1)
    assert (len(m), len(v)) == (22, 10)


def test_mask_random_deterministic():
    a = G.mask_random(32, 0.7, rng=42)
    b = G.mask_random(32, 0.7, rng=42)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_mask_rounding_ties_to_even():
    assert G.masked_count(10, 0.25) == 2  # 2.5 -> 2
    assert G.masked_count(4, 0.375) == 2  # 1.5 -> 2
    assert G.masked_count(4, 0.125) == 0  # 0.5 -> 0
    assert G.masked_count(32, 0.7) == 22


@pytest.mark.parametrize("ratio", [-0.1, 1.0, 1.5])
def test_mask_bad_ratio(ratio):
    with pytest.raises(G.GeometryError):
        G.mask_random(32, ratio, rng=0)
    with pytest.raises(G.GeometryError):
        G.mask_block(np.zeros((32, 3)), ratio, rng=0)


def test_mask_block_single():
    centers = random_cloud(2, 20)
    v, m = G.mask_block(centers, 0.05, seed_index=7)
    assert m.tolist() == [7]


def test_mask_block_line():
    centers = np.zeros((32, 3))
    centers[:, 0] = np.arange(32)
    v, m = G.mask_block(centers, 0.7, seed_index=0)
    assert m.tolist() == list(range(22))
    assert v.tolist() == list(range(22, 32))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), s=st.integers(1, 64), ratio=st.floats(0, 0.99))
def test_mask_block_is_nearest_to_seed(seed, s, ratio):
    centers = random_cloud(seed, s)
    rng = np.random.default_rng(seed)
    v, m = G.mask_block(centers, ratio, rng=rng)
    k = G.masked_count(s, ratio)
    assert len(m) == k and len(v) == s - k
    assert set(v.tolist()).isdisjoint(m.tolist())
    if k:
        seed_index = int(np.random.default_rng(seed).integers(s))
        assert sorted(m.tolist()) == sorted(knn_bruteforce(centers, centers[seed_index], k))
        assert seed_index in m


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), s=st.integers(1, 64), ratio=st.floats(0, 0.99))
def test_mask_random_partition(seed, s, ratio):
    v, m = G.mask_random(s, ratio, rng=seed)
    assert len(m) == G.masked_count(s, ratio)
    assert sorted(np.concatenate([v, m]).tolist()) == list(range(s))


# ---------------------------------------------------------------- chamfer

def test_chamfer_identical():
    pts = random_cloud(0, 40)
    assert G.chamfer_distance(pts, pts) == 0.0


def test_chamfer_single_pair():
    assert G.chamfer_distance([[0, 0, 0]], [[1.0, 0, 0]]) == 2.0


def test_chamfer_two_to_one():
    assert G.chamfer_distance([[0, 0, 0], [2.0, 0, 0]], [[1.0, 0, 0]]) == 2.0


def test_chamfer_empty():
    with pytest.raises(G.GeometryError):
        G.chamfer_distance(np.zeros((0, 3)), np.zeros((2, 3)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 60), m=st.integers(1, 60))
def test_chamfer_matches_bruteforce(seed, n, m):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    ref = chamfer_bruteforce(a, b)
    assert G.chamfer_distance(a, b) == pytest.approx(ref, rel=1e-12)
    assert G.chamfer_distance(a, b) == G.chamfer_distance(b, a)
    perm = rng.permutation(n)
    assert G.chamfer_distance(a[perm], b) == pytest.approx(G.chamfer_distance(a, b), rel=1e-14)


def test_nearest_backends_agree(kernel_impl):
    from mae3d import _kernels_py

    rng = np.random.default_rng(9)
    a = np.ascontiguousarray(rng.integers(0, 3, size=(700, 3)).astype(float))
    b = np.ascontiguousarray(rng.integers(0, 3, size=(90, 3)).astype(float))
    d1, i1 = kernel_impl.nearest(a, b)
    d2, i2 = _kernels_py.nearest(a, b)
    np.testing.assert_array_equal(d1, d2)
    np.testing.assert_array_equal(i1, i2)
