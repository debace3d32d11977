import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from conftest import brute_force_nearest, full_dijkstra, random_patch
from nrreg.geometry import (
    Surface,
    build_spatial_index,
    closest_point,
    knn_edges,
    limited_geodesic,
    normalize_pair,
    project_to_rotation,
    project_to_rotation_batch,
)
from nrreg.synth import strip_mesh

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


# --- surface -----------------------------------------------------------------


def test_surface_edges_from_faces():
    s = Surface(np.eye(3), [[0, 1, 2]])
    assert s.edges.tolist() == [[0, 1], [0, 2], [1, 2]]
    assert s.avg_edge_length == pytest.approx(np.sqrt(2))


def test_surface_invariants_on_strip():
    s = strip_mesh(7, 5)
    e = s.edges
    assert (e[:, 0] < e[:, 1]).all()
    assert len(np.unique(e, axis=0)) == len(e)
    assert e.max() < len(s.points)
    lengths = np.linalg.norm(s.points[e[:, 0]] - s.points[e[:, 1]], axis=1)
    assert s.avg_edge_length == pytest.approx(lengths.mean(), abs=1e-15)


def test_surface_rejects_bad_face_index():
    with pytest.raises(ValueError):
        Surface(np.zeros((3, 3)), [[0, 1, 3]])


def test_point_cloud_gets_knn_edges():
    pts = np.random.default_rng(0).normal(size=(10, 3))
    s = Surface(pts)
    assert s.faces is None
    deg = np.bincount(s.edges.ravel(), minlength=10)
    assert (deg >= 6).all()


# --- spatial index -----------------------------------------------------------


def test_single_point_index():
    idx = build_spatial_index([[0, 0, 0]])
    i, d = closest_point(idx, [5, 5, 5])
    assert i == 0 and d == pytest.approx(np.sqrt(75))


def test_two_point_index():
    idx = build_spatial_index([[0, 0, 0], [1, 0, 0]])
    assert closest_point(idx, [0.4, 0, 0])[0] == 0


def test_query_on_indexed_point():
    pts = np.random.default_rng(1).normal(size=(30, 3))
    i, d = closest_point(build_spatial_index(pts), pts[17])
    assert i == 17 and d == 0.0


def test_tie_goes_to_smallest_index():
    pts = np.zeros((10, 3))
    pts[:, 0] = np.arange(1, 11) * 10.0
    pts[3] = [-1, 0, 0]
    pts[7] = [1, 0, 0]
    assert closest_point(build_spatial_index(pts), [0, 0, 0])[0] == 3


def test_many_equidistant_points_tie_break():
    # 12 points on a circle around the query: more ties than k-d tree candidates
    ang = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    pts = np.c_[np.cos(ang), np.sin(ang), np.zeros(12)]
    order = np.random.default_rng(2).permutation(12)
    pts = pts[order]
    idx = build_spatial_index(pts)
    i, _ = closest_point(idx, [0, 0, 0])
    d = np.linalg.norm(pts, axis=1)
    assert i == np.flatnonzero(d == d.min()).min()


def test_empty_index_rejected():
    with pytest.raises(ValueError):
        build_spatial_index(np.zeros((0, 3)))


@pytest.mark.parametrize("seed", range(5))
def test_index_matches_exhaustive_scan(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(size=(200, 3))
    q = rng.uniform(size=(50, 3))
    i, d = build_spatial_index(pts).query(q)
    bi, bd = brute_force_nearest(pts, q)
    assert np.array_equal(i, bi)
    np.testing.assert_allclose(d, bd, rtol=0, atol=1e-15)


def test_index_matches_exhaustive_scan_large():
    rng = np.random.default_rng(9)
    pts = rng.uniform(size=(10_000, 3))
    q = rng.uniform(size=(300, 3))
    i, _ = build_spatial_index(pts).query(q)
    bi, _ = brute_force_nearest(pts, q)
    assert np.array_equal(i, bi)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)), elements=st.integers(-3, 3).map(float)),
    arrays(np.float64, (5, 3), elements=st.integers(-3, 3).map(float)),
)
def test_index_integer_grid_ties(pts, q):
    # integer coordinates produce lots of exact ties
    i, _ = build_spatial_index(pts).query(q)
    bi, _ = brute_force_nearest(pts, q)
    assert np.array_equal(i, bi)


# --- knn ---------------------------------------------------------------------


def test_knn_two_points():
    assert knn_edges([[0, 0, 0], [1, 0, 0]], 1).tolist() == [[0, 1]]


def test_knn_collinear():
    e = knn_edges([[0, 0, 0], [1, 0, 0], [3, 0, 0]], 1)
    assert e.tolist() == [[0, 1], [1, 2]]


def test_knn_degree_and_oracle():
    pts = np.random.default_rng(3).normal(size=(100, 3))
    e = knn_edges(pts, 6)
    assert (np.bincount(e.ravel(), minlength=100) >= 6).all()
    d2 = ((pts[:, None] - pts[None]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    nn = np.argsort(d2, axis=1)[:, :6]
    expect = {tuple(sorted((i, int(j)))) for i in range(100) for j in nn[i]}
    assert set(map(tuple, e.tolist())) == expect


def test_knn_k_too_large():
    with pytest.raises(ValueError):
        knn_edges(np.zeros((3, 3)), 3)


# --- geodesics ---------------------------------------------------------------


def test_geodesic_path_graph():
    s = Surface(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], float), edges=[[0, 1], [1, 2]])
    assert limited_geodesic(s, 0, 1.5) == {0: 0.0, 1: 1.0}


def test_geodesic_small_radius():
    s = strip_mesh(4, 4)
    assert limited_geodesic(s, 5, 0.5 * s.avg_edge_length * 0.5) == {5: 0.0}


def test_geodesic_isolated_vertex():
    s = Surface(np.array([[0, 0, 0], [1, 0, 0], [5, 5, 5]], float), edges=[[0, 1]])
    assert limited_geodesic(s, 2, 100.0) == {2: 0.0}


@pytest.mark.parametrize("seed", range(6))
def test_geodesic_matches_dijkstra(seed):
    s = random_patch(seed)
    rng = np.random.default_rng(seed)
    for src in rng.choice(len(s.points), 5, replace=False):
        R = rng.uniform(0.05, 0.5)
        got = limited_geodesic(s, int(src), R)
        full = full_dijkstra(s, int(src))
        expect = {i: full[i] for i in np.flatnonzero(full < R)}
        assert set(got) == set(expect)
        for i, d in got.items():
            assert d == pytest.approx(expect[i], abs=1e-12)
            # Euclidean never exceeds the path length
            assert np.linalg.norm(s.points[i] - s.points[src]) <= d + 1e-12


# --- rotations ---------------------------------------------------------------


def test_rotation_examples():
    np.testing.assert_allclose(project_to_rotation(np.eye(3)), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(project_to_rotation(np.diag([2, 1, 0.5])), np.eye(3), atol=1e-15)
    R90 = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], float)
    np.testing.assert_allclose(project_to_rotation(3 * R90), R90, atol=1e-14)


def test_rotation_reflection_input():
    R = project_to_rotation(np.diag([1, 1, -1.0]))
    assert np.linalg.det(R) == pytest.approx(1.0)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 3), elements=finite))
def test_rotation_projection_property(A):
    R = project_to_rotation(A)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) > 0
    Q = Rotation.random(100, random_state=0).as_matrix()
    best = np.linalg.norm(A - R)
    assert np.all(best <= np.linalg.norm(A[None] - Q, axis=(1, 2)) + 1e-9)


def test_rotation_fixed_point():
    Q = Rotation.random(50, random_state=1).as_matrix()
    for R in Q:
        np.testing.assert_allclose(project_to_rotation(R), R, atol=1e-12)


def test_batch_matches_single():
    A = np.random.default_rng(4).normal(size=(40, 3, 3))
    R, smin = project_to_rotation_batch(A)
    for a, r in zip(A, R):
        np.testing.assert_allclose(r, project_to_rotation(a), atol=1e-12)
    np.testing.assert_allclose(smin, np.linalg.svd(A, compute_uv=False)[:, -1])


# --- normalization -----------------------------------------------------------


def _cube(side):
    c = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    return Surface(c * side)


def test_normalize_unit_diagonal():
    s = _cube(1 / np.sqrt(3))
    norm, _, _ = normalize_pair(s, s)
    assert norm.scale == pytest.approx(1.0)


def test_normalize_cube_diag_two():
    s = _cube(2 / np.sqrt(3))
    norm, _, _ = normalize_pair(s, s)
    assert norm.scale == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(5))
def test_normalize_random_pair(seed):
    rng = np.random.default_rng(seed)
    a = Surface(rng.normal(size=(30, 3)) * 7 + 3)
    b = Surface(rng.normal(size=(20, 3)) * 2 - 1)
    norm, sa, sb = normalize_pair(a, b)
    allp = np.vstack([sa.points, sb.points])
    assert np.linalg.norm(allp.max(0) - allp.min(0)) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(norm.invert(sa.points), a.points, atol=1e-12)


def test_normalize_degenerate():
    s = Surface(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        normalize_pair(s, s)
