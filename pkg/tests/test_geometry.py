import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbsde import geometry as geo
from rbsde.exceptions import PointOutsideError, UnboundedError
from rbsde.geometry import Ball, Box, Intersection, Polytope, hausdorff

TRIANGLE = Polytope([[1, 1], [-1, 0], [0, -1]], [1, 0, 0])


# -- spec examples ----------------------------------------------------------

def test_projection_examples():
    np.testing.assert_allclose(Ball([0, 0], 1).project([2, 0]), [1, 0])
    np.testing.assert_allclose(Box([-1, -1], [1, 1]).project([0.5, 3]), [0.5, 1])
    np.testing.assert_allclose(TRIANGLE.project([1, 1]), [0.5, 0.5], atol=1e-9)


def test_triangle_projection_against_grid_search():
    # brute force: nearest feasible point on a fine grid
    g = np.linspace(0, 1, 2001)
    X, Y = np.meshgrid(g, g)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    pts = pts[pts.sum(axis=1) <= 1 + 1e-12]
    for x in ([1.0, 1.0], [2.0, -0.5], [-0.3, 0.4], [0.2, 1.3]):
        best = pts[np.argmin(np.sum((pts - x) ** 2, axis=1))]
        np.testing.assert_allclose(TRIANGLE.project(x), best, atol=1e-3)


def test_distance_examples():
    assert Ball([0, 0], 1).distance([2, 0]) == pytest.approx(1.0)
    assert Box([-1, -1], [1, 1]).distance([2, 2]) == pytest.approx(math.sqrt(2))
    for g in (Ball([0, 0], 1), Box([-1, -1], [1, 1]), TRIANGLE):
        assert g.distance(g.slater) == 0.0


def test_boundary_distance_examples():
    assert Ball([0, 0], 2).boundary_distance([1, 0]) == pytest.approx(1.0)
    assert Box([-1, -1], [1, 1]).boundary_distance([0, 0]) == pytest.approx(1.0)
    seg = Polytope([[1.0], [-1.0]], [1.0, 1.0])
    assert seg.boundary_distance([0.7]) == pytest.approx(0.3)
    with pytest.raises(PointOutsideError):
        Ball([0, 0], 1).boundary_distance([3, 0])


def test_support_examples():
    assert Ball([1, 0], 1).support([1, 0]) == pytest.approx(2.0)
    u = np.array([1, 1]) / math.sqrt(2)
    assert Box([-1, -1], [1, 1]).support(u) == pytest.approx(math.sqrt(2))
    assert TRIANGLE.support([0, 1]) == pytest.approx(1.0)


def test_hausdorff_examples():
    assert hausdorff(Ball([0, 0], 1), Ball([0, 0], 1)) == 0.0
    assert hausdorff(Ball([0, 0], 1), Ball([0.5, 0], 1)) == pytest.approx(0.5, abs=1e-4)
    assert hausdorff(Ball([0, 0], 1), Ball([0, 0], 2)) == pytest.approx(1.0, abs=1e-4)


def test_hausdorff_of_nested_intervals_is_two():
    # support functions: h differs by 2 in direction -1
    assert hausdorff(Box([-2], [2]), Box([0], [2])) == pytest.approx(2.0)


def test_contains_examples():
    assert Ball([0, 0], 1).contains([0, 0])
    assert Ball([0, 0], 1).contains([1 + 1e-9, 0], tol=1e-8)
    assert not Box([-1], [1]).contains([1.5], tol=0.1)


def test_construction_errors():
    with pytest.raises(ValueError):
        Ball([0, 0], 0.0)
    with pytest.raises(ValueError):
        Box([0, 1], [1, 1])
    with pytest.raises(ValueError):
        Polytope([[1.0], [-1.0]], [0.0, 0.0])  # a single point has empty interior
    with pytest.raises(ValueError):
        Polytope([[0.0, 0.0]], [1.0])


def test_polytope_rows_are_normalised():
    p = Polytope([[2.0, 0.0], [0.0, -3.0]], [2.0, 3.0], slater=[0.0, 0.0])
    np.testing.assert_allclose(np.linalg.norm(p.normals, axis=1), 1.0)
    np.testing.assert_allclose(p.offsets, [1.0, 1.0])


def test_unbounded_polytope_support_raises():
    half = Polytope([[1.0, 0.0]], [1.0], slater=[0.0, 0.0])
    assert not half.is_bounded
    with pytest.raises(UnboundedError):
        half.support([1.0, 0.0])
    assert TRIANGLE.is_bounded


def test_unbounded_polytope_projection_still_works():
    strip = Polytope([[1.0, 0.0], [-1.0, 0.0]], [1.0, 1.0], slater=[0.0, 0.0])
    np.testing.assert_allclose(strip.project([3.0, 7.0]), [1.0, 7.0])


def test_batched_sets_project_per_path():
    g = Box(np.array([[0.0], [1.0]]), np.array([[1.0], [2.0]]))
    np.testing.assert_allclose(g.project(np.array([[1.5], [0.5]])), [[1.0], [1.0]])
    b = Ball(np.zeros((3, 2)), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(b.distance(np.tile([4.0, 0.0], (3, 1))), [3.0, 2.0, 1.0])


def test_intersection_projection_matches_dense_search():
    g = Intersection([Ball([0, 0], 1), Box([-0.5, -2], [2, 0.6])])
    t = np.linspace(-1, 1, 1601)
    X, Y = np.meshgrid(t, t)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    pts = pts[np.all(g.contains(pts, 1e-12)[:, None], axis=1)]
    for x in ([2.0, 2.0], [-2.0, 0.0], [0.0, -3.0], [1.5, 0.3]):
        y = g.project(x)
        # the grid minimiser can slide along the boundary, so compare distances
        best = np.sqrt(np.min(np.sum((pts - x) ** 2, axis=1)))
        assert g.distance(y) <= 1e-10
        assert best - 2e-3 <= math.dist(x, y) <= best + 1e-8


def test_intersection_support_matches_vertices():
    a = Box([-1, -1], [1, 1])
    b = Polytope([[1, 1]], [1], slater=[0, 0])
    g = Intersection([a, b])
    verts = np.array([[-1, -1], [1, -1], [1, 0], [0, 1], [-1, 1]], dtype=float)
    for ang in np.linspace(0, 2 * np.pi, 17):
        u = np.array([math.cos(ang), math.sin(ang)])
        assert g.support(u) == pytest.approx(np.max(verts @ u), abs=1e-9)


def test_from_dict_round_trip():
    for g in (Ball([1, 2], 0.5), Box([0, 0], [1, 2]), TRIANGLE,
              Intersection([Ball([0, 0], 1), Box([-0.5, -2], [2, 0.6])])):
        h = geo.from_dict(g.to_dict())
        x = np.array([[3.0, -1.0], [0.2, 0.1], [-4.0, 5.0]])
        np.testing.assert_allclose(h.project(x), g.project(x), atol=1e-9)


# -- properties ---------------------------------------------------------------

coords = st.floats(-3, 3, allow_nan=False)


@st.composite
def convex_sets(draw):
    kind = draw(st.sampled_from(["ball", "box", "polytope", "intersection"]))
    m = draw(st.integers(1, 3))
    c = np.array(draw(st.lists(coords, min_size=m, max_size=m)))
    if kind == "ball":
        return Ball(c, draw(st.floats(0.1, 3)))
    if kind == "box":
        w = np.array(draw(st.lists(st.floats(0.1, 2), min_size=m, max_size=m)))
        return Box(c - w, c + w)
    seed = draw(st.integers(0, 2**32 - 1))
    r = np.random.default_rng(seed)
    k = draw(st.integers(m + 1, 7))
    normals = r.normal(size=(k, m))
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    offsets = normals @ c + r.uniform(0.2, 2.0, size=k)
    poly = Polytope(normals, offsets, slater=c)
    if kind == "polytope":
        return poly
    return Intersection([poly, Ball(c, draw(st.floats(0.5, 3)))], slater=c)


def probes(g, n, seed):
    r = np.random.default_rng(seed)
    return g.slater + r.normal(scale=3.0, size=(n, g.m))


@settings(max_examples=60, deadline=None)
@given(convex_sets(), st.integers(0, 1000))
def test_projection_is_idempotent_and_feasible(g, seed):
    x = probes(g, 50, seed)
    y = g.project(x)
    np.testing.assert_allclose(g.project(y), y, atol=1e-8)
    assert np.all(g.distance(y) <= 1e-8)


@settings(max_examples=60, deadline=None)
@given(convex_sets(), st.integers(0, 1000))
def test_projection_monotonicity(g, seed):
    x, x2 = probes(g, 50, seed), probes(g, 50, seed + 1)
    lhs = np.sum((x - x2) * ((x - g.project(x)) - (x2 - g.project(x2))), axis=1)
    assert np.all(lhs >= -1e-10)


@settings(max_examples=60, deadline=None)
@given(convex_sets(), st.integers(0, 1000))
def test_inward_normal_inequalities(g, seed):
    x = probes(g, 80, seed)
    y = g.project(x)
    gap = np.linalg.norm(y - x, axis=1)
    out = gap > 1e-6
    x, y, gap = x[out], y[out], gap[out]
    a = g.slater
    r = float(g.boundary_distance(a))
    n = (y - x) / gap[:, None]
    assert np.all(np.sum((y - a) * n, axis=1) <= -r + 1e-8)
    assert np.all(np.sum((x - a) * (y - x), axis=1) <= -r * gap + 1e-8)


@settings(max_examples=60, deadline=None)
@given(convex_sets(), st.integers(0, 1000))
def test_projection_is_nearest_among_feasible_samples(g, seed):
    x = probes(g, 20, seed)
    y = g.project(x)
    cand = g.project(probes(g, 200, seed + 7))
    d_best = np.linalg.norm(x - y, axis=1)
    d_cand = np.linalg.norm(x[:, None, :] - cand[None], axis=2).min(axis=1)
    assert np.all(d_best <= d_cand + 1e-8)


@settings(max_examples=40, deadline=None)
@given(st.lists(coords, min_size=2, max_size=2), st.floats(0.1, 3),
       st.lists(coords, min_size=2, max_size=2), st.floats(0.1, 3))
def test_hausdorff_ball_identity(c, r, c2, r2):
    exact = math.dist(c, c2) + abs(r - r2)
    assert hausdorff(Ball(c, r), Ball(c2, r2), directions=4096) == pytest.approx(exact, abs=1e-5)


@settings(max_examples=30, deadline=None)
@given(convex_sets(), convex_sets())
def test_hausdorff_is_symmetric_and_nonnegative(g, h):
    if g.m != h.m or not (g.is_bounded and h.is_bounded):
        return
    a, b = hausdorff(g, h, 64), hausdorff(h, g, 64)
    assert a >= 0
    assert a == pytest.approx(b)
    assert hausdorff(g, g, 64) == 0.0


@settings(max_examples=30, deadline=None)
@given(convex_sets(), st.integers(0, 1000))
def test_depth_is_distance_to_boundary_inside(g, seed):
    # for points inside, a ball of radius depth stays inside the set
    x = g.project(probes(g, 30, seed))
    x = 0.5 * (x + g.slater)
    dep = g.depth(x)
    r = np.random.default_rng(seed).normal(size=(30, g.m))
    r /= np.linalg.norm(r, axis=1)[:, None]
    assert np.all(g.distance(x + 0.999 * dep[:, None] * r) <= 1e-9)
