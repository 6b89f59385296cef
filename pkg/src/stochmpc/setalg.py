"""Polytope arithmetic and invariant-set computation.

Polytopes are stored in halfspace form ``{x : A x <= b}``.  Vertex
enumeration is used only at low dimension (``dim <= 4``), which covers
every system this package is meant for.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, HalfspaceIntersection, QhullError

VERTEX_DIM_LIMIT = 4
PRUNE_TOL = 1e-9
SET_TOL = 1e-8


class GeometryError(ValueError):
    """Raised for invalid or degenerate set operations."""


class NotConvergedError(RuntimeError):
    """An iterative set recursion hit its cap.

    ``partial`` holds the last (non-certified) iterate.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


def _as_matrix(m, name="matrix"):
    arr = np.atleast_2d(np.asarray(m, dtype=float))
    if arr.ndim != 2:
        raise GeometryError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def _lp_max(c, A, b):
    """Maximise c @ x over {A x <= b}. Returns (value, x) or raises."""
    res = linprog(-np.asarray(c, float), A_ub=A, b_ub=b, bounds=(None, None), method="highs")
    if res.status == 2:
        raise GeometryError("LP infeasible: polytope is empty")
    if res.status == 3:
        raise GeometryError("LP unbounded: polytope is unbounded")
    if res.status != 0:
        raise GeometryError(f"LP failed: {res.message}")
    return -res.fun, res.x


@dataclass(frozen=True, eq=False)
class Polytope:
    """Bounded convex polytope ``{x : A x <= b}``.

    Instances are immutable; arrays are flagged read-only.  Pass
    ``check=False`` to skip the boundedness / emptiness LPs when the caller
    already knows the set is valid (e.g. a convex hull result).
    """

    A: np.ndarray
    b: np.ndarray
    check: bool = field(default=True, repr=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if A.shape[0] != b.shape[0]:
            raise GeometryError(f"A has {A.shape[0]} rows but b has {b.shape[0]} entries")
        norms = np.linalg.norm(A, axis=1)
        zero = norms <= 1e-14
        if np.any(b[zero] < -1e-12):
            raise GeometryError("polytope is empty (0 <= negative offset)")
        A, b = A[~zero], b[~zero]
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        if self.check:
            self._validate()

    def _validate(self):
        if self.A.shape[0] == 0:
            raise GeometryError("polytope with no halfspaces is unbounded")
        # raises if empty or unbounded
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = 1.0
            _lp_max(e, self.A, self.b)
            _lp_max(-e, self.A, self.b)

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def n_halfspaces(self) -> int:
        return self.A.shape[0]

    # constructors -----------------------------------------------------

    @classmethod
    def box(cls, lower, upper=None):
        """Axis-aligned box; ``box(h)`` is the symmetric box ``[-h, h]``."""
        upper_ = np.asarray(lower if upper is None else upper, dtype=float).reshape(-1)
        lower_ = -upper_ if upper is None else np.asarray(lower, dtype=float).reshape(-1)
        if np.any(lower_ > upper_):
            raise GeometryError("box lower bound exceeds upper bound")
        n = upper_.size
        A = np.vstack([np.eye(n), -np.eye(n)])
        b = np.concatenate([upper_, -lower_])
        return cls(A, b, check=False)

    @classmethod
    def point(cls, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        return cls.box(x, x)

    @classmethod
    def from_vertices(cls, points):
        A, b = _hull_halfspaces(np.atleast_2d(np.asarray(points, dtype=float)))
        poly = cls(A, b, check=False)
        return poly

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, (str, Path)):
            obj = json.loads(Path(obj).read_text())
        return cls(obj["A"], obj["b"])

    def to_json(self) -> dict:
        return {"A": self.A.tolist(), "b": self.b.tolist()}

    # queries ------------------------------------------------------------

    def support(self, d) -> float:
        return support(self, d)

    def contains(self, x, tol=1e-9) -> bool:
        x = np.asarray(x, dtype=float).reshape(-1)
        return bool(np.all(self.A @ x <= self.b + tol))

    def contains_many(self, X, tol=1e-9) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.all(X @ self.A.T <= self.b + tol, axis=1)

    def scale(self, c: float) -> "Polytope":
        if c <= 0:
            raise GeometryError("scale factor must be positive")
        out = Polytope(self.A, c * self.b, check=False)
        if "vertices" in self._cache:
            out._cache["vertices"] = c * self._cache["vertices"]
        return out

    def vertices(self) -> np.ndarray:
        """Vertex list (dim <= 4 only), cached."""
        if "vertices" not in self._cache:
            self._cache["vertices"] = _enumerate_vertices(self.A, self.b)
        return self._cache["vertices"]

    def chebyshev(self):
        """Centre and radius of the largest inscribed Euclidean ball."""
        norms = np.linalg.norm(self.A, axis=1)
        n = self.dim
        c = np.zeros(n + 1)
        c[-1] = 1.0
        A = np.hstack([self.A, norms[:, None]])
        val, sol = _lp_max(c, A, self.b)
        return sol[:n], val

    def __repr__(self):
        return f"Polytope(dim={self.dim}, halfspaces={self.n_halfspaces})"


@dataclass(frozen=True)
class SetApproximation:
    """Inner/outer pair bracketing a set, with a Hausdorff gap bound."""

    inner: Polytope
    outer: Polytope
    hausdorff_gap: float
    n_terms: int = 0
    alpha: float = 0.0


# --------------------------------------------------------------------------
# vertex / hull kernels


def _dedupe_points(P, tol=1e-9):
    if len(P) == 0:
        return P
    keep = []
    for p in P:
        if not any(np.max(np.abs(p - q)) <= tol * max(1.0, np.max(np.abs(q))) for q in keep):
            keep.append(p)
    return np.array(keep)


def _brute_vertices(A, b, tol=1e-9):
    n = A.shape[1]
    pts = []
    for idx in itertools.combinations(range(A.shape[0]), n):
        sub = A[list(idx)]
        if abs(np.linalg.det(sub)) < 1e-12:
            continue
        x = np.linalg.solve(sub, b[list(idx)])
        if np.all(A @ x <= b + tol * (1 + np.abs(b))):
            pts.append(x)
    if not pts:
        raise GeometryError("no vertices found: polytope is empty or unbounded")
    return _dedupe_points(np.array(pts))


def _enumerate_vertices(A, b):
    n = A.shape[1]
    if n > VERTEX_DIM_LIMIT:
        raise GeometryError(f"vertex enumeration limited to dim <= {VERTEX_DIM_LIMIT}")
    if n == 1:
        a = A[:, 0]
        hi = np.min(b[a > 0] / a[a > 0]) if np.any(a > 0) else np.inf
        lo = np.max(b[a < 0] / a[a < 0]) if np.any(a < 0) else -np.inf
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise GeometryError("unbounded interval")
        if lo > hi + 1e-12:
            raise GeometryError("empty interval")
        return np.array([[lo], [hi]]) if hi - lo > 1e-12 else np.array([[0.5 * (lo + hi)]])
    norms = np.linalg.norm(A, axis=1)
    An, bn = A / norms[:, None], b / norms
    try:
        centre, radius = Polytope(An, bn, check=False).chebyshev()
    except GeometryError:
        raise
    if radius > 1e-7:
        try:
            hs = HalfspaceIntersection(np.hstack([An, -bn[:, None]]), centre)
            return _dedupe_points(hs.intersections)
        except QhullError:
            pass
    return _brute_vertices(An, bn)


def _canonical_rows(A, b, tol=1e-9):
    """Normalise rows and merge near-identical normals (keep tightest)."""
    norms = np.linalg.norm(A, axis=1)
    A, b = A / norms[:, None], b / norms
    keep_A, keep_b = [], []
    for a, bb in zip(A, b):
        for k, ka in enumerate(keep_A):
            if np.max(np.abs(a - ka)) <= tol:
                keep_b[k] = min(keep_b[k], bb)
                break
        else:
            keep_A.append(a)
            keep_b.append(bb)
    return np.array(keep_A), np.array(keep_b)


def _hull_halfspaces(points):
    points = _dedupe_points(points)
    n = points.shape[1]
    centre = points.mean(axis=0)
    Y = points - centre
    scale = max(1.0, float(np.max(np.abs(points))))
    if len(points) > 1:
        _, s, vt = np.linalg.svd(Y, full_matrices=True)
        rank = int(np.sum(s > 1e-10 * scale))
    else:
        vt = np.eye(n)
        rank = 0
    U = vt[:rank].T  # basis of the affine hull directions
    N = vt[rank:].T  # orthogonal complement
    rows, offs = [], []
    if rank == 1:
        y = Y @ U[:, 0]
        u = U[:, 0]
        rows += [u, -u]
        offs += [y.max() + u @ centre, -y.min() - u @ centre]
    elif rank >= 2:
        Z = Y @ U
        if rank == n:
            hull = ConvexHull(Z)
        else:
            hull = ConvexHull(Z)
        for eq in hull.equations:
            a_low, off = eq[:-1], eq[-1]
            a = U @ a_low
            rows.append(a)
            offs.append(-off + a @ centre)
    for k in range(N.shape[1]):
        v = N[:, k]
        rows += [v, -v]
        offs += [v @ centre, -(v @ centre)]
    A, b = _canonical_rows(np.array(rows, dtype=float), np.array(offs, dtype=float))
    return A, b


# --------------------------------------------------------------------------
# public operations


def support(p: Polytope, d) -> float:
    """Support value ``max {d @ x : x in p}`` computed by LP."""
    d = np.asarray(d, dtype=float).reshape(-1)
    if d.size != p.dim:
        raise GeometryError(f"direction has dimension {d.size}, polytope has {p.dim}")
    if not np.linalg.norm(d) > 0:
        raise GeometryError("support direction must be nonzero")
    val, _ = _lp_max(d, p.A, p.b)
    return float(val)


def support_vertices(p: Polytope, D) -> np.ndarray:
    """Support values for each row of ``D`` using the cached vertex list."""
    V = p.vertices()
    return np.max(np.atleast_2d(D) @ V.T, axis=1)


def _check_same_dim(p, q):
    if p.dim != q.dim:
        raise GeometryError(f"dimension mismatch: {p.dim} vs {q.dim}")


def minkowski_sum(p: Polytope, q: Polytope) -> Polytope:
    """Exact Minkowski sum ``p + q``.

    At dim <= 4 the result is the hull of all vertex-pair sums.  Above that
    the support values along the union of both normal fans are used, which
    is exact only when the fans are compatible.
    """
    _check_same_dim(p, q)
    if p.dim <= VERTEX_DIM_LIMIT:
        Vp, Vq = p.vertices(), q.vertices()
        pts = (Vp[:, None, :] + Vq[None, :, :]).reshape(-1, p.dim)
        out = Polytope.from_vertices(pts)
        return out
    dirs = np.vstack([p.A, q.A])
    h = np.array([support(p, d) + support(q, d) for d in dirs])
    return prune_redundant(Polytope(dirs, h, check=False))


def affine_image(m, p: Polytope) -> Polytope:
    """Image ``{m x : x in p}``."""
    m = _as_matrix(m)
    if m.shape[1] != p.dim:
        raise GeometryError(f"matrix has {m.shape[1]} columns, polytope dimension is {p.dim}")
    if m.shape[0] == m.shape[1] and abs(np.linalg.det(m)) > 1e-12:
        minv = np.linalg.inv(m)
        out = Polytope(p.A @ minv, p.b, check=False)
        if "vertices" in p._cache:
            out._cache["vertices"] = p._cache["vertices"] @ m.T
        return out
    if p.dim > VERTEX_DIM_LIMIT or m.shape[0] > VERTEX_DIM_LIMIT:
        raise GeometryError("singular affine image requires dim <= 4")
    return Polytope.from_vertices(p.vertices() @ m.T)


def is_subset(p: Polytope, q: Polytope, tol: float = SET_TOL) -> bool:
    """True iff every halfspace of ``q`` holds on ``p`` up to ``tol``."""
    _check_same_dim(p, q)
    if p.dim <= VERTEX_DIM_LIMIT:
        return bool(np.all(support_vertices(p, q.A) <= q.b + tol))
    return all(support(p, a) <= bb + tol for a, bb in zip(q.A, q.b))


def sets_equal(p: Polytope, q: Polytope, tol: float = SET_TOL) -> bool:
    return is_subset(p, q, tol) and is_subset(q, p, tol)


def prune_redundant(p: Polytope, tol: float = PRUNE_TOL) -> Polytope:
    """Drop halfspaces implied by the others (one LP per row)."""
    A, b = _canonical_rows(np.asarray(p.A), np.asarray(p.b))
    keep = np.ones(len(b), dtype=bool)
    for i in range(len(b)):
        mask = keep.copy()
        mask[i] = False
        if not mask.any():
            continue
        # relax row i so the LP stays bounded
        A_i = np.vstack([A[mask], A[i]])
        b_i = np.concatenate([b[mask], [b[i] + 1.0]])
        try:
            val, _ = _lp_max(A[i], A_i, b_i)
        except GeometryError:
            continue
        if val <= b[i] + tol:
            keep[i] = False
    return Polytope(A[keep], b[keep], check=False)


def scaled(p: Polytope, c: float) -> Polytope:
    return p.scale(c)


def hausdorff_distance(p: Polytope, q: Polytope) -> float:
    """Euclidean Hausdorff distance between two polytopes (dim <= 4)."""
    from .qpcore import QuadraticProgram, solve

    def dist_to(V, poly):
        worst = 0.0
        n = poly.dim
        for v in V:
            if poly.contains(v, tol=1e-12):
                continue
            qp = QuadraticProgram(np.eye(n), -v, G=poly.A, h=poly.b)
            sol = solve(qp, tol=1e-10)
            worst = max(worst, float(np.linalg.norm(sol.z_star - v)))
        return worst

    _check_same_dim(p, q)
    return max(dist_to(p.vertices(), q), dist_to(q.vertices(), p))


def polytope_radius(p: Polytope) -> float:
    """Largest Euclidean norm over the polytope."""
    return float(np.max(np.linalg.norm(p.vertices(), axis=1)))


# --------------------------------------------------------------------------
# invariant sets


def _spectral_radius(phi):
    return float(np.max(np.abs(np.linalg.eigvals(phi)))) if phi.size else 0.0


def _zero_set(n):
    return Polytope.point(np.zeros(n))


def mrpi_outer(phi, d_matrix, w: Polytope, eps: float, max_terms: int = 500) -> SetApproximation:
    """Outer epsilon-approximation of the minimal RPI set of ``x+ = phi x + D w``.

    The set approximated is the infinite sum of ``phi^j D W`` over ``j >= 0``.
    With ``F_s`` the partial sum of its first ``s`` terms and ``alpha`` the
    smallest scalar with ``phi^s D W`` inside ``alpha D W``, the outer set is
    ``F_s / (1 - alpha)``; ``F_s`` itself is returned as the inner set.  The
    number of terms is the smallest one whose gap bound
    ``alpha / (1 - alpha) * max ||x||`` over ``F_s`` is at most ``eps``.
    """
    phi = _as_matrix(phi, "phi")
    d_matrix = _as_matrix(d_matrix, "d_matrix")
    n = phi.shape[0]
    if phi.shape != (n, n):
        raise GeometryError("phi must be square")
    if d_matrix.shape != (n, w.dim):
        raise GeometryError(f"D must be {n}x{w.dim}, got {d_matrix.shape}")
    if eps <= 0:
        raise GeometryError("eps must be positive")
    if _spectral_radius(phi) >= 1.0 - 1e-10:
        raise GeometryError("phi is not Schur stable")

    DW = affine_image(d_matrix, w)
    VW = DW.vertices()
    if np.max(np.abs(VW)) <= 1e-14:
        zero = _zero_set(n)
        return SetApproximation(inner=zero, outer=zero, hausdorff_gap=0.0, n_terms=0, alpha=0.0)
    if DW.n_halfspaces == 0 or np.any(DW.b <= 1e-12):
        raise GeometryError("D W must contain the origin in its interior (or be {0})")

    F = DW
    phi_s = np.eye(n)
    for s in range(1, max_terms + 1):
        phi_s = phi @ phi_s
        # alpha(s) = max_i h_{DW}((phi^s)^T a_i) / b_i
        hs = np.max((DW.A @ phi_s) @ VW.T, axis=1)
        alpha = float(max(0.0, np.max(hs / DW.b)))
        if alpha < 1.0:
            gap = alpha / (1.0 - alpha) * polytope_radius(F)
            if gap <= eps:
                outer = F.scale(1.0 / (1.0 - alpha)) if alpha > 0 else F
                return SetApproximation(inner=F, outer=outer, hausdorff_gap=gap, n_terms=s, alpha=alpha)
        F = minkowski_sum(F, affine_image(phi_s, DW))
    raise NotConvergedError(f"mrpi_outer: gap above {eps} after {max_terms} terms", partial=F)


def certify_rpi(omega: Polytope, phi, d_matrix, w: Polytope, tol: float = SET_TOL):
    """Check ``phi Omega + D W`` inside ``Omega``.

    Returns ``(ok, margin)`` where margin is the largest row violation.
    """
    phi = _as_matrix(phi)
    img = affine_image(phi, omega)
    DW = affine_image(d_matrix, w)
    lhs = support_vertices(img, omega.A) + support_vertices(DW, omega.A)
    viol = float(np.max(lhs - omega.b))
    return viol <= tol, viol


def max_rpi(phi, d_matrix, w: Polytope, x_constraint: Polytope, max_iter: int = 200, tol: float = PRUNE_TOL) -> Polytope:
    """Maximal RPI subset of ``x_constraint`` for ``x+ = phi x + D w``.

    Backward constraint recursion: at step ``t`` each constraint row ``a``
    contributes ``a phi^t x <= b - sum_{j<t} h_{DW}((phi^j)^T a)``.  Stops
    when every new row is redundant.  Raises :class:`NotConvergedError`
    (with the partial set) if ``max_iter`` is reached.
    """
    phi = _as_matrix(phi, "phi")
    d_matrix = _as_matrix(d_matrix, "d_matrix")
    n = phi.shape[0]
    if x_constraint.dim != n:
        raise GeometryError("constraint set dimension does not match phi")
    if _spectral_radius(phi) >= 1.0 - 1e-10:
        raise GeometryError("phi is not Schur stable")
    DW = affine_image(d_matrix, w)
    VW = DW.vertices()

    A0, b0 = np.asarray(x_constraint.A), np.asarray(x_constraint.b)
    A_cur, b_cur = A0.copy(), b0.copy()
    tighten = np.zeros_like(b0)
    phi_t = np.eye(n)
    for t in range(1, max_iter + 1):
        # h_{DW}((phi^{t-1})^T a) for each row a
        tighten = tighten + np.max((A0 @ phi_t) @ VW.T, axis=1)
        phi_t = phi @ phi_t
        A_new = A0 @ phi_t
        b_new = b0 - tighten
        if np.any(b_new < -tol):
            # origin excluded; check whether anything survives
            try:
                _lp_max(np.zeros(n), np.vstack([A_cur, A_new]), np.concatenate([b_cur, b_new]))
            except GeometryError as exc:
                raise GeometryError("maximal RPI set is empty: disturbance too large for constraints") from exc
        redundant = True
        add_A, add_b = [], []
        for a, bb in zip(A_new, b_new):
            if np.linalg.norm(a) <= 1e-14:
                if bb < -tol:
                    raise GeometryError("maximal RPI set is empty")
                continue
            val, _ = _lp_max(a, A_cur, b_cur)
            if val > bb + tol:
                redundant = False
                add_A.append(a)
                add_b.append(bb)
        if redundant:
            out = prune_redundant(Polytope(A_cur, b_cur, check=False))
            return out
        A_cur = np.vstack([A_cur, add_A])
        b_cur = np.concatenate([b_cur, add_b])
        try:
            _lp_max(np.zeros(n), A_cur, b_cur)
        except GeometryError as exc:
            raise GeometryError("maximal RPI set is empty") from exc
    raise NotConvergedError(
        f"max_rpi did not reach a fixpoint in {max_iter} iterations",
        partial=Polytope(A_cur, b_cur, check=False),
    )


def save_polytope(p: Polytope, path) -> None:
    Path(path).write_text(json.dumps(p.to_json(), indent=2, sort_keys=True) + "\n")


def load_polytope(path) -> Polytope:
    return Polytope.from_json(path)
