import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from helpers import numgrad, rel_err
from protoshape import geometry as G
from protoshape.tensor import ContractError, Tensor, tsum

coords = st.floats(-0.5, 0.5, allow_nan=False)
clouds = arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)), elements=coords)


def sphere(n, seed=0):
    v = np.random.default_rng(seed).normal(size=(n, 3))
    return 0.5 * v / np.linalg.norm(v, axis=1, keepdims=True)


# normalize

def test_normalize_cube_corners():
    corners = np.array(list(itertools.product([0.0, 1.0], repeat=3)))
    out = G.normalize(corners)
    assert np.array_equal(out.points, corners - 0.5) and not out.degenerate


def test_normalize_single_point():
    out = G.normalize(np.array([[3.0, -2.0, 7.0]]))
    assert out.degenerate and np.array_equal(out.points, np.zeros((1, 3)))


@given(arrays(np.float64, (12, 3), elements=st.floats(-100, 100, allow_nan=False)))
def test_normalize_round_trip(pts):
    out = G.normalize(pts)
    assert np.all(np.abs(out.points) <= 0.5)
    if not out.degenerate:
        back = G.denormalize(out.points, out.center, out.scale)
        assert np.abs(back - pts).max() <= 1e-12 * max(1.0, np.abs(pts).max())


def test_normalize_rejects_empty():
    with pytest.raises(ContractError):
        G.normalize(np.zeros((0, 3)))


# farthest point sampling

def test_fps_all_points_is_permutation():
    pts = sphere(30)
    out = G.farthest_point_sampling(pts, 30)
    assert sorted(map(tuple, out)) == sorted(map(tuple, pts))


def test_fps_square_corners():
    sq = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    out = G.farthest_point_sampling(sq, 2, seed_index=0)
    # brute force: the candidate farthest from the seed
    far = sq[np.argmax(((sq - sq[0]) ** 2).sum(1))]
    assert np.array_equal(out[1], far) and np.array_equal(far, [1, 1, 0])


def test_fps_ties_pick_lowest_index():
    pts = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0]], dtype=float)
    _, idx = G.farthest_point_sampling(pts, 2, 0, return_index=True)
    assert idx[1] == 1


def test_fps_beats_random_subsets():
    for seed in range(20):
        r = np.random.default_rng(seed)
        pts = r.uniform(-0.5, 0.5, (50, 3))
        m = 8

        def min_gap(p):
            d = np.sqrt(((p[:, None] - p[None]) ** 2).sum(-1))
            return d[np.triu_indices(len(p), 1)].min()

        fps_gap = min_gap(G.farthest_point_sampling(pts, m))
        best_random = max(min_gap(pts[r.choice(50, m, replace=False)]) for _ in range(100))
        assert fps_gap >= best_random


def test_fps_contract():
    with pytest.raises(ContractError):
        G.farthest_point_sampling(np.zeros((3, 3)), 4)


@given(clouds, st.data())
def test_fps_subset_of_input(pts, data):
    m = data.draw(st.integers(1, len(pts)))
    out, idx = G.farthest_point_sampling(pts, m, return_index=True)
    assert np.array_equal(out, pts[idx]) and len(set(idx.tolist())) == m


# gridding

def test_gridding_point_at_cell_center():
    res = 4
    c = G.cell_centers(res)[21]
    grid = G.gridding(c[None], res).grid.ravel()
    assert grid[21] == 1.0 and grid.sum() == 1.0


def test_gridding_empty_region_is_zero():
    grid = G.gridding(np.array([[-0.45, -0.45, -0.45]]), 8).grid[0]
    assert not grid[4:, 4:, 4:].any()


def test_gridding_midpoint_splits_mass():
    res = 4
    c = G.cell_centers(res)
    a, b = c[0], c[16]  # neighbours along x
    grid = G.gridding(((a + b) / 2)[None], res, clamp=False).grid.ravel()
    assert grid[0] == 0.5 and grid[16] == 0.5


@given(clouds, st.sampled_from([2, 4, 8]))
def test_gridding_mass(pts, res):
    raw = G.gridding(pts, res, clamp=False).grid
    assert abs(raw.sum() - len(pts)) <= 1e-9 * len(pts)
    clamped = G.gridding(pts, res).grid
    assert clamped.sum() <= len(pts) + 1e-9 and clamped.max() <= 1.0 and clamped.min() >= 0.0


def test_gridding_counts_clamped_points():
    res = G.gridding(np.array([[0.7, 0.0, 0.0], [0.0, 0.0, 0.0]]), 4)
    assert res.n_clamped == 1


# gridding reverse

def test_reverse_round_trip_single_point():
    res = 8
    c = G.cell_centers(res)[100]
    out = G.gridding_reverse(G.gridding(c[None], res).grid, 0.5)
    assert len(out) == 1 and np.abs(out[0] - c).max() <= 0.5 / res


def test_reverse_empty_grid():
    with pytest.raises(G.EmptyOutputError):
        G.gridding_reverse(np.zeros((1, 4, 4, 4)), 0.3)


def test_reverse_uniform_r2():
    out = G.gridding_reverse(np.ones((1, 2, 2, 2)), 0.5)
    expected = np.array(list(itertools.product([-0.25, 0.25], repeat=3)))
    assert np.array_equal(out, expected)


def test_reverse_rejects_negative():
    with pytest.raises(ContractError):
        G.gridding_reverse(-np.ones((1, 2, 2, 2)), 0.5)


# point feature sampling

def test_pfs_at_cell_center():
    r = np.random.default_rng(0)
    feats = r.normal(size=(3, 4, 4, 4))
    q = G.cell_centers(4)[[5, 37]]
    out = G.point_feature_sampling(Tensor(feats), q).data
    assert np.allclose(out, feats.reshape(3, -1)[:, [5, 37]].T, atol=1e-15)


@given(arrays(np.float64, (10, 3), elements=coords))
def test_pfs_constant_grid(q):
    out = G.point_feature_sampling(Tensor(np.full((2, 4, 4, 4), 1.5)), q).data
    assert np.allclose(out, 1.5, atol=1e-12)


def test_pfs_grad():
    r = np.random.default_rng(1)
    feats, q = r.normal(size=(2, 4, 4, 4)), r.uniform(-0.5, 0.5, (6, 3))
    c = r.normal(size=(6, 2))
    t = Tensor(feats, requires_grad=True)
    tsum(G.point_feature_sampling(t, q) * Tensor(c)).backward()
    fd = numgrad(lambda f: float((G.point_feature_sampling(Tensor(f), q).data * c).sum()), feats)
    assert rel_err(t.grad, fd) <= 1e-4


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3),
       arrays(np.float64, (5, 3), elements=st.floats(-0.5 + 1 / 16, 0.5 - 1 / 16)))
def test_pfs_exact_on_linear_fields(a, b, c, d, q):
    centers = G.cell_centers(8)
    field = (centers @ np.array([a, b, c]) + d).reshape(1, 8, 8, 8)
    out = G.point_feature_sampling(Tensor(field), q).data[:, 0]
    assert np.abs(out - (q @ np.array([a, b, c]) + d)).max() <= 1e-10


# partial views

def test_zbuffer_keeps_nearer_point():
    pts = np.array([[0.0, 0.0, 0.1], [0.0, 0.0, 0.3]])
    out = G.make_partial(pts, [0, 0, 1], 32)
    assert np.array_equal(out, pts[[1]])


def test_planar_face_on_keeps_all():
    g = (np.arange(8) - 3.5) / 10
    pts = np.array([[x, y, 0.0] for x in g for y in g])
    out = G.make_partial(pts, [0, 0, 1], 64)
    assert len(out) == len(pts)


def test_sphere_visible_fraction_band():
    r = np.random.default_rng(0)
    pts = sphere(512, seed=1)
    fracs = [len(G.make_partial(pts, G.random_view(r), 32)) / 512 for _ in range(100)]
    assert 0.30 <= min(fracs) and max(fracs) <= 0.70


@given(clouds, arrays(np.float64, 3, elements=st.floats(-1, 1)).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_partial_is_subset(pts, view):
    out, idx = G.make_partial(pts, view, 16, return_index=True)
    assert 1 <= len(out) <= len(pts) and np.array_equal(out, pts[idx])


def test_rotation_to_z():
    for v in ([1, 2, 3], [0, 0, -1], [0, 0, 1], [1e-3, 0, -1]):
        rot = G.rotation_to_z(v)
        v = np.asarray(v, float) / np.linalg.norm(v)
        assert np.allclose(rot @ v, [0, 0, 1], atol=1e-12)
        assert np.allclose(rot @ rot.T, np.eye(3), atol=1e-12)


# file format

def test_pcf_round_trip(tmp_path):
    pts = np.random.default_rng(2).uniform(-0.5, 0.5, (17, 3)).astype(np.float32)
    G.write_pcf(tmp_path / "a.pcf", pts)
    raw = (tmp_path / "a.pcf").read_bytes()
    assert raw[:4] == b"PCF1" and int.from_bytes(raw[4:8], "little") == 17 and len(raw) == 8 + 17 * 12
    assert np.array_equal(G.read_pcf(tmp_path / "a.pcf"), pts.astype(np.float64))


def test_pcf_rejects_bad_files(tmp_path):
    (tmp_path / "bad.pcf").write_bytes(b"XXXX\x01\x00\x00\x00")
    with pytest.raises(OSError):
        G.read_pcf(tmp_path / "bad.pcf")
    (tmp_path / "short.pcf").write_bytes(b"PCF1\x02\x00\x00\x00" + b"\x00" * 12)
    with pytest.raises(OSError):
        G.read_pcf(tmp_path / "short.pcf")
