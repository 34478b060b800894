from itertools import combinations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from histomorph.delaunay import (
    convex_hull,
    edges_of,
    incircle,
    merge_duplicates,
    neighbor_distances,
    orient,
    triangulate,
)


def brute_force_delaunay(pts):
    """Every triple whose circumcircle holds no other point (general position assumed)."""
    pts = np.asarray(pts, float)
    n = len(pts)
    tri = np.array(list(combinations(range(n), 3)))
    a, b, c = pts[tri[:, 0]], pts[tri[:, 1]], pts[tri[:, 2]]
    d = 2 * (a[:, 0] * (b[:, 1] - c[:, 1]) + b[:, 0] * (c[:, 1] - a[:, 1]) + c[:, 0] * (a[:, 1] - b[:, 1]))
    ok = np.abs(d) > 1e-12
    tri, a, b, c, d = tri[ok], a[ok], b[ok], c[ok], d[ok]
    sa, sb, sc = (a**2).sum(1), (b**2).sum(1), (c**2).sum(1)
    ux = (sa * (b[:, 1] - c[:, 1]) + sb * (c[:, 1] - a[:, 1]) + sc * (a[:, 1] - b[:, 1])) / d
    uy = (sa * (c[:, 0] - b[:, 0]) + sb * (a[:, 0] - c[:, 0]) + sc * (b[:, 0] - a[:, 0])) / d
    r2 = (a[:, 0] - ux) ** 2 + (a[:, 1] - uy) ** 2
    dist2 = (pts[None, :, 0] - ux[:, None]) ** 2 + (pts[None, :, 1] - uy[:, None]) ** 2
    inside = dist2 < r2[:, None] * (1 - 1e-10)
    inside[np.arange(len(tri))[:, None], tri] = False
    return {tuple(sorted(t)) for t in tri[~inside.any(axis=1)]}


def as_sets(tris):
    return {tuple(sorted(t)) for t in tris}


# ---------------------------------------------------------------- predicates


def test_orient_and_incircle_signs():
    assert orient((0, 0), (1, 0), (0, 1)) == 1
    assert orient((0, 0), (0, 1), (1, 0)) == -1
    assert orient((0, 0), (1, 1), (2, 2)) == 0
    assert incircle((0, 0), (1, 0), (0, 1), (0.5, 0.5)) == 1
    assert incircle((0, 0), (1, 0), (0, 1), (1, 1)) == 0
    assert incircle((0, 0), (1, 0), (0, 1), (3, 3)) == -1


def test_predicates_exact_near_degeneracy():
    # 1e-17 offsets vanish in a naive float determinant
    a, b = (0.5, 0.5), (12.0, 12.0)
    assert orient(a, b, (24.0, 24.0)) == 0
    assert orient(a, b, (24.0, 24.000000000000004)) == 1


# ---------------------------------------------------------------- triangulation


def test_single_triangle():
    pts = np.array([[0.0, 0.0], [4.0, 0.0], [0.0, 3.0]])
    tris = triangulate(pts)
    assert len(tris) == 1 and orient(*pts[list(tris[0])]) == 1
    stats = neighbor_distances(pts, tris)
    np.testing.assert_array_equal(stats[:, 3], [2, 2, 2])
    np.testing.assert_allclose(stats[0, :3], [3, 4, 3.5])
    np.testing.assert_allclose(stats[1, :3], [4, 5, 4.5])
    np.testing.assert_allclose(stats[2, :3], [3, 5, 4])


def test_unit_square():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    tris = triangulate(pts)
    assert len(tris) == 2
    assert len(edges_of(tris)) == 5
    assert sorted(neighbor_distances(pts, tris)[:, 3]) == [2, 2, 3, 3]


@pytest.mark.parametrize("pts", [
    [],
    [[0, 0]],
    [[0, 0], [1, 1]],
    [[0, 0], [1, 1], [2, 2], [5, 5]],
    [[1, 1], [1, 1], [1, 1 + 1e-12]],
])
def test_degenerate_inputs_give_no_triangles(pts):
    assert triangulate(np.array(pts, float).reshape(-1, 2)) == []


def test_matches_brute_force_on_random_sets():
    r = np.random.default_rng(7)
    for _ in range(60):
        n = int(r.integers(3, 51))
        pts = r.uniform(0, 512, (n, 2))
        assert as_sets(triangulate(pts)) == brute_force_delaunay(pts)


def test_grid_points_with_cocircular_quads():
    xs, ys = np.meshgrid(np.arange(5.0), np.arange(4.0))
    pts = np.c_[xs.ravel(), ys.ravel()]
    tris = triangulate(pts)
    assert len(tris) == 2 * 4 * 3
    # empty circumcircle, allowing points on the circle
    for t in tris:
        for k in range(len(pts)):
            if k not in t:
                assert incircle(*pts[list(t)], pts[k]) <= 0


@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 30)), min_size=3, max_size=25, unique=True))
def test_triangulation_properties(raw):
    pts = np.array(raw, float)
    tris = triangulate(pts)
    if not tris:
        assert all(orient(pts[0], pts[1], p) == 0 for p in pts)
        return
    for t in tris:
        assert orient(*pts[list(t)]) == 1
        for k in range(len(pts)):
            if k not in t:
                assert incircle(*pts[list(t)], pts[k]) <= 0
    # Euler: boundary points include those lying along hull edges
    on_hull = len(convex_hull(pts, keep_collinear=True))
    assert len(tris) == 2 * len(pts) - 2 - on_hull


def test_hull_keeps_collinear_points_on_request():
    pts = [[0, 0], [0, 1], [0, 2], [1, 0]]
    assert sorted(convex_hull(pts)) == [0, 2, 3]
    assert sorted(convex_hull(pts, keep_collinear=True)) == [0, 1, 2, 3]
    assert len(triangulate(pts)) == 2


def test_invariant_to_point_order():
    r = np.random.default_rng(3)
    pts = r.uniform(0, 100, (40, 2))
    perm = r.permutation(40)
    a = {tuple(sorted(map(int, perm[list(t)]))) for t in triangulate(pts[perm])}
    assert a == as_sets(triangulate(pts))


def test_merge_duplicates():
    pts = [[0, 0], [1, 1], [0, 1e-12], [1, 1]]
    unique, index = merge_duplicates(pts)
    assert len(unique) == 2
    assert list(index) == [0, 1, 0, 1]


def test_neighbor_distance_ordering():
    r = np.random.default_rng(5)
    pts = r.uniform(0, 100, (30, 2))
    s = neighbor_distances(pts, triangulate(pts))
    assert (s[:, 3] >= 2).all()
    assert (s[:, 0] <= s[:, 2]).all() and (s[:, 2] <= s[:, 1]).all()
