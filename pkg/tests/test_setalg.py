import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import ConvexHull

from stochmpc import setalg
from stochmpc.setalg import GeometryError, NotConvergedError, Polytope

coords = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@st.composite
def point_clouds(draw, n=2):
    k = draw(st.integers(n + 1, 8))
    pts = np.array(draw(st.lists(st.tuples(*[coords] * n), min_size=k, max_size=k)))
    try:
        ConvexHull(pts)
    except Exception:
        pts = np.vstack([pts, np.eye(n), -np.eye(n)])
    return pts


directions = st.tuples(st.floats(-1, 1), st.floats(-1, 1)).map(np.array).filter(lambda d: np.linalg.norm(d) > 1e-3)


def test_box_support_and_membership():
    p = Polytope.box([-1.0, -2.0], [3.0, 4.0])
    assert p.support([1.0, 0.0]) == pytest.approx(3.0)
    assert p.support([0.0, -1.0]) == pytest.approx(2.0)
    assert p.contains([3.0, 4.0])
    assert not p.contains([3.1, 0.0])
    assert p.contains_many(np.array([[0, 0], [5, 0]])).tolist() == [True, False]


def test_vertices_of_box():
    V = Polytope.box([1.0, 2.0]).vertices()
    assert sorted(map(tuple, np.round(V, 12))) == [(-1, -2), (-1, 2), (1, -2), (1, 2)]


def test_json_roundtrip(tmp_path):
    p = Polytope.box([1.0, 2.0])
    q = Polytope.from_json(json.loads(json.dumps(p.to_json())))
    assert setalg.sets_equal(p, q)
    setalg.save_polytope(p, tmp_path / "p.json")
    assert setalg.sets_equal(setalg.load_polytope(tmp_path / "p.json"), p)


def test_empty_polytope_rejected():
    with pytest.raises(GeometryError):
        Polytope(np.array([[1.0], [-1.0]]), np.array([-1.0, -1.0]))


@settings(max_examples=40, deadline=None)
@given(point_clouds(), point_clouds(), directions)
def test_minkowski_support_additive(P, Q, d):
    p, q = Polytope.from_vertices(P), Polytope.from_vertices(Q)
    s = setalg.minkowski_sum(p, q)
    # independent oracle: support of a hull is a max over its generating points
    assert s.support(d) == pytest.approx(np.max(P @ d) + np.max(Q @ d), abs=1e-7)


@settings(max_examples=40, deadline=None)
@given(point_clouds(), st.lists(st.floats(-2, 2), min_size=4, max_size=4), directions)
def test_affine_image_support(P, m, d):
    M = np.array(m).reshape(2, 2)
    img = setalg.affine_image(M, Polytope.from_vertices(P))
    assert img.support(d) == pytest.approx(np.max(P @ M.T @ d), abs=1e-7)


@settings(max_examples=30, deadline=None)
@given(point_clouds(), st.floats(0.2, 3.0))
def test_scale_and_subset(P, c):
    p = Polytope.from_vertices(P - P.mean(axis=0))
    assert setalg.is_subset(p, p)
    big = p.scale(max(c, 1.0) + 0.1)
    assert setalg.is_subset(p, big)
    assert not setalg.is_subset(p.scale(2.0), p) or setalg.polytope_radius(p) < 1e-9


@settings(max_examples=30, deadline=None)
@given(point_clouds())
def test_prune_redundant_keeps_set(P):
    p = Polytope.from_vertices(P)
    A = np.vstack([p.A, p.A[:1]])
    b = np.concatenate([p.b, p.b[:1] + 1.0])
    q = setalg.prune_redundant(Polytope(A, b))
    assert setalg.sets_equal(p, q)
    assert q.n_halfspaces <= p.n_halfspaces


def test_hausdorff_distance_boxes():
    a = Polytope.box([1.0, 1.0])
    b = Polytope.box([2.0, 1.0])
    assert setalg.hausdorff_distance(a, b) == pytest.approx(1.0, abs=1e-6)
    assert setalg.hausdorff_distance(a, a) == pytest.approx(0.0, abs=1e-9)


def test_mrpi_scalar_interval():
    w = Polytope.box([1.0])
    approx = setalg.mrpi_outer([[0.5]], [[1.0]], w, 1e-3)
    target = Polytope.box([2.0])
    assert setalg.hausdorff_distance(approx.outer, target) <= 1e-3
    assert setalg.is_subset(approx.inner, target)
    assert setalg.is_subset(target, approx.outer)
    ok, _ = setalg.certify_rpi(approx.outer, [[0.5]], [[1.0]], w, tol=1e-8)
    assert ok


def test_mrpi_diagonal_product():
    phi = np.diag([0.5, 0.8])
    w = Polytope.box([1.0, 1.0])
    approx = setalg.mrpi_outer(phi, np.eye(2), w, 1e-3)
    target = Polytope.box([2.0, 5.0])  # per axis 1 / (1 - phi_ii)
    assert setalg.hausdorff_distance(approx.outer, target) <= 1e-3
    assert setalg.certify_rpi(approx.outer, phi, np.eye(2), w, tol=1e-8)[0]


def test_mrpi_gap_bound_holds(di_sys):
    from stochmpc import lti

    K = lti.dare(di_sys, np.eye(2), np.eye(1)).k_gain
    phi = di_sys.a_matrix + di_sys.b_matrix @ K
    w = Polytope.box([0.1, 0.1])
    approx = setalg.mrpi_outer(phi, np.eye(2), w, 1e-3)
    assert setalg.is_subset(approx.inner, approx.outer)
    assert setalg.hausdorff_distance(approx.inner, approx.outer) <= approx.hausdorff_gap + 1e-9
    assert setalg.certify_rpi(approx.outer, phi, np.eye(2), w)[0]


def test_mrpi_rejects_unstable():
    with pytest.raises(GeometryError):
        setalg.mrpi_outer([[1.0]], [[1.0]], Polytope.box([1.0]), 1e-3)


def test_mrpi_not_converged_partial():
    with pytest.raises(NotConvergedError) as info:
        setalg.mrpi_outer([[0.99]], [[1.0]], Polytope.box([1.0]), 1e-9, max_terms=3)
    assert info.value.partial is not None


def test_certify_rpi_detects_scaled_down_set():
    w = Polytope.box([1.0])
    ok, viol = setalg.certify_rpi(Polytope.box([1.5]), [[0.5]], [[1.0]], w)
    assert not ok and viol > 0


def test_max_rpi_scalar():
    # x+ = 0.5 x + w, |w| <= 1 inside |x| <= 3: every state in [-3, 3] stays there
    X = Polytope.box([3.0])
    O = setalg.max_rpi([[0.5]], [[1.0]], Polytope.box([1.0]), X)
    assert setalg.sets_equal(O, Polytope.box([3.0]))
    # x+ = 2x is expanding: only the origin region that survives is empty-ish under w
    with pytest.raises((GeometryError, NotConvergedError)):
        setalg.max_rpi([[2.0]], [[1.0]], Polytope.box([1.0]), X)


@settings(max_examples=20, deadline=None)
@given(point_clouds(), point_clouds())
def test_minkowski_matches_vertex_pair_hull(P, Q):
    p, q = Polytope.from_vertices(P), Polytope.from_vertices(Q)
    pairs = (P[:, None, :] + Q[None, :, :]).reshape(-1, 2)
    assert setalg.sets_equal(setalg.minkowski_sum(p, q), Polytope.from_vertices(pairs), tol=1e-7)


@settings(max_examples=15, deadline=None)
@given(point_clouds(), point_clouds(), point_clouds())
def test_minkowski_commutative_associative(P, Q, R):
    p, q, r = (Polytope.from_vertices(V) for V in (P, Q, R))
    assert setalg.sets_equal(setalg.minkowski_sum(p, q), setalg.minkowski_sum(q, p), tol=1e-7)
    left = setalg.minkowski_sum(setalg.minkowski_sum(p, q), r)
    right = setalg.minkowski_sum(p, setalg.minkowski_sum(q, r))
    assert setalg.sets_equal(left, right, tol=1e-6)


def test_rotated_box():
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    img = setalg.affine_image(rot, Polytope.box([-1.0, -2.0], [1.0, 2.0]))
    assert setalg.sets_equal(img, Polytope.box([-2.0, -1.0], [2.0, 1.0]))


@settings(max_examples=20, deadline=None)
@given(point_clouds(), point_clouds())
def test_subset_matches_vertex_membership(P, Q):
    p, q = Polytope.from_vertices(P), Polytope.from_vertices(Q)
    expected = bool(np.all(q.contains_many(p.vertices(), tol=1e-7)))
    assert setalg.is_subset(p, q, tol=1e-7) == expected


def test_mrpi_diagonal_quarter_half():
    approx = setalg.mrpi_outer(np.diag([0.5, 0.25]), np.eye(2), Polytope.box([1.0, 1.0]), 1e-4)
    exact = Polytope.box([2.0, 4.0 / 3.0])
    assert setalg.hausdorff_distance(approx.outer, exact) <= 1e-4 * 1.01
    assert setalg.is_subset(exact, approx.outer)
    assert setalg.is_subset(approx.inner, exact)


def test_mrpi_gap_shrinks_with_eps():
    phi = np.array([[0.6, 0.3], [-0.2, 0.5]])
    W = Polytope.box([0.3, 0.1])
    gaps = [setalg.mrpi_outer(phi, np.eye(2), W, eps).hausdorff_gap for eps in (1e-2, 5e-3, 2.5e-3, 1.25e-3)]
    assert all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))


def test_max_rpi_scalar_small_disturbance():
    S = setalg.max_rpi([[0.5]], [[1.0]], Polytope.box([0.1]), Polytope.box([1.0]))
    assert S.support([1.0]) == pytest.approx(1.0) and S.support([-1.0]) == pytest.approx(1.0)


def test_max_rpi_contains_mrpi():
    phi = np.array([[0.6, 0.3], [-0.2, 0.5]])
    W = Polytope.box([0.3, 0.1])
    big = setalg.max_rpi(phi, np.eye(2), W, Polytope.box([3.0, 3.0]))
    approx = setalg.mrpi_outer(phi, np.eye(2), W, 1e-3)
    assert setalg.is_subset(approx.inner, big)
