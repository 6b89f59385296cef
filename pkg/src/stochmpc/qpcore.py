"""Dense convex QP solver.

Solves::

    minimize    1/2 z'Hz + f'z
    subject to  G z <= h,  E z = e

with an operator-splitting (ADMM) iteration in the style of OSQP: fixed
penalty, over-relaxation, row-norm preconditioning of the constraint
matrix.  Once the iterates settle, a polish step solves the KKT system on
the detected active set, which restores full accuracy.  The same polish is
tried first on the empty (or warm-start) active set, so problems whose
unconstrained minimiser is feasible never enter the ADMM loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITER = "max_iter"

RHO = 1.0
RHO_EQ_FACTOR = 1e3
SIGMA = 1e-6
RELAX = 1.6
MAX_ITERATIONS = 200_000
CHECK_EVERY = 10
INFEAS_TOL = 1e-6
LP_REG = 1e-9


def _empty(n):
    return np.zeros((0, n)), np.zeros(0)


@dataclass(frozen=True)
class QuadraticProgram:
    """``min 1/2 z'Hz + f'z  s.t.  G z <= h, E z = e``."""

    h_matrix: np.ndarray
    f_vector: np.ndarray
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    E: np.ndarray | None = None
    e: np.ndarray | None = None

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.h_matrix, dtype=float))
        n = H.shape[0]
        if H.shape != (n, n):
            raise ValueError(f"H must be square, got {H.shape}")
        H = 0.5 * (H + H.T)
        f = np.asarray(self.f_vector, dtype=float).reshape(-1)
        if f.size != n:
            raise ValueError(f"f has size {f.size}, expected {n}")
        G, h = _empty(n) if self.G is None else (np.asarray(self.G, float).reshape(-1, n), np.asarray(self.h, float).reshape(-1))
        E, e = _empty(n) if self.E is None else (np.asarray(self.E, float).reshape(-1, n), np.asarray(self.e, float).reshape(-1))
        if G.shape[0] != h.size or E.shape[0] != e.size:
            raise ValueError("constraint matrix and right-hand side sizes disagree")
        for name, val in (("h_matrix", H), ("f_vector", f), ("G", G), ("h", h), ("E", E), ("e", e)):
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.h_matrix.shape[0]

    def objective(self, z) -> float:
        return float(0.5 * z @ self.h_matrix @ z + self.f_vector @ z)


@dataclass
class QpSolution:
    z_star: np.ndarray
    objective: float
    status: str
    primal_residual: float
    dual_residual: float
    active_set: list = field(default_factory=list)
    y_ineq: np.ndarray | None = None
    y_eq: np.ndarray | None = None
    iterations: int = 0
    polished: bool = False

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def kkt_residuals(qp: QuadraticProgram, z, y_ineq=None, y_eq=None) -> dict:
    """Independent KKT check: stationarity, primal/dual feasibility, complementarity."""
    z = np.asarray(z, float)
    y_ineq = np.zeros(qp.G.shape[0]) if y_ineq is None else np.asarray(y_ineq, float)
    y_eq = np.zeros(qp.E.shape[0]) if y_eq is None else np.asarray(y_eq, float)
    grad = qp.h_matrix @ z + qp.f_vector + qp.G.T @ y_ineq + qp.E.T @ y_eq
    slack = qp.G @ z - qp.h
    out = {
        "stationarity": float(np.max(np.abs(grad), initial=0.0)),
        "primal": float(max(np.max(slack, initial=0.0), np.max(np.abs(qp.E @ z - qp.e), initial=0.0))),
        "dual": float(max(0.0, -np.min(y_ineq, initial=0.0))),
        "complementarity": float(np.max(np.abs(y_ineq * slack), initial=0.0)),
    }
    return out


def kkt_ok(qp: QuadraticProgram, sol: QpSolution, tol: float) -> bool:
    r = kkt_residuals(qp, sol.z_star, sol.y_ineq, sol.y_eq)
    scale = 1.0 + max(np.max(np.abs(qp.f_vector), initial=0.0), np.max(np.abs(qp.h), initial=0.0))
    return all(v <= tol * scale for v in r.values())


class QpSolver:
    """Workspace for repeated solves sharing ``H``, ``G`` and ``E``.

    Only ``f``, ``h`` and ``e`` may change between calls, so the KKT
    factorisation is computed once.  Not safe to share across threads
    mid-solve; give each worker its own instance.
    """

    def __init__(self, H, G=None, E=None, rho: float = RHO, sigma: float = SIGMA, relax: float = RELAX):
        H = np.atleast_2d(np.asarray(H, float))
        self.n = H.shape[0]
        self.H = 0.5 * (H + H.T)
        self.G = _empty(self.n)[0] if G is None else np.asarray(G, float).reshape(-1, self.n)
        self.E = _empty(self.n)[0] if E is None else np.asarray(E, float).reshape(-1, self.n)
        self.m_in = self.G.shape[0]
        self.m_eq = self.E.shape[0]
        A = np.vstack([self.G, self.E])
        norms = np.linalg.norm(A, axis=1)
        norms[norms < 1e-14] = 1.0
        self.row_scale = 1.0 / norms
        self.A = A * self.row_scale[:, None]
        self.rho_vec = np.concatenate([np.full(self.m_in, rho), np.full(self.m_eq, rho * RHO_EQ_FACTOR)])
        self.sigma = sigma
        self.relax = relax
        K = self.H + sigma * np.eye(self.n) + self.A.T @ (self.rho_vec[:, None] * self.A)
        self._chol = cho_factor(K)
        # explicit inverse: the ADMM loop is dominated by call overhead at desk-scale sizes
        self._kinv = cho_solve(self._chol, np.eye(self.n), check_finite=False)
        self._hess_chol = None
        try:
            self._hess_chol = cho_factor(self.H + 1e-14 * np.eye(self.n))
        except np.linalg.LinAlgError:
            self._hess_chol = None

    # ------------------------------------------------------------------
    def _polish(self, f, h, e, active, tol):
        """Solve the equality-constrained KKT system on ``active`` rows.

        A short primal-dual repair loop adds the most violated row or drops
        the most negative multiplier until the point is KKT-optimal.
        """
        n, G, E = self.n, self.G, self.E
        active = sorted(set(int(i) for i in active))
        scale = 1.0 + max(np.max(np.abs(f), initial=0.0), np.max(np.abs(h), initial=0.0))
        seen = set()
        for _ in range(4 * (n + self.m_eq) + 8):
            key = tuple(active)
            if key in seen:
                return None
            seen.add(key)
            Ga = G[active]
            C = np.vstack([Ga, E])
            k = C.shape[0]
            if k == 0 and self._hess_chol is not None:
                z = -cho_solve(self._hess_chol, f)
                y = np.zeros(0)
            else:
                KKT = np.zeros((n + k, n + k))
                KKT[:n, :n] = self.H
                KKT[:n, n:] = C.T
                KKT[n:, :n] = C
                rhs = np.concatenate([-f, h[active], e])
                sol, *_ = np.linalg.lstsq(KKT, rhs, rcond=None)
                z, y = sol[:n], sol[n:]
                # one step of iterative refinement
                r = rhs - KKT @ sol
                if np.max(np.abs(r), initial=0.0) > 1e-14 * scale:
                    d, *_ = np.linalg.lstsq(KKT, r, rcond=None)
                    z, y = z + d[:n], y + d[n:]
            if k and np.max(np.abs(C @ z - np.concatenate([h[active], e]))) > 1e3 * tol * scale:
                return None  # inconsistent active set
            viol = G @ z - h if self.m_in else np.zeros(0)
            y_act = y[: len(active)]
            worst_viol = int(np.argmax(viol)) if self.m_in else -1
            if self.m_in and viol[worst_viol] > tol * scale:
                if worst_viol in active:
                    return None
                active = sorted(active + [worst_viol])
                continue
            if len(active) and np.min(y_act) < -tol * scale:
                drop = active[int(np.argmin(y_act))]
                active = [i for i in active if i != drop]
                continue
            y_in = np.zeros(self.m_in)
            y_in[active] = np.maximum(y_act, 0.0)
            y_eq = y[len(active):]
            grad = self.H @ z + f + G.T @ y_in + E.T @ y_eq
            if np.max(np.abs(grad), initial=0.0) > tol * scale:
                return None
            return z, y_in, y_eq, active
        return None

    def _package(self, z, y_in, y_eq, f, h, e, status, iters, polished, active=None):
        qp_G, qp_E = self.G, self.E
        grad = self.H @ z + f + qp_G.T @ y_in + qp_E.T @ y_eq
        prim = max(np.max(qp_G @ z - h, initial=0.0), np.max(np.abs(qp_E @ z - e), initial=0.0))
        if active is None:
            active = [int(i) for i in np.flatnonzero(y_in > 0)]
        obj = float(0.5 * z @ self.H @ z + f @ z)
        return QpSolution(
            z_star=z,
            objective=obj,
            status=status,
            primal_residual=float(max(prim, 0.0)),
            dual_residual=float(np.max(np.abs(grad), initial=0.0)),
            active_set=list(active),
            y_ineq=y_in,
            y_eq=y_eq,
            iterations=iters,
            polished=polished,
        )

    def solve(
        self, f, h=None, e=None, tol: float = 1e-8, max_iter: int = MAX_ITERATIONS, warm_start=None, initial_polish: bool = True
    ) -> QpSolution:
        """Solve for the given linear term and right-hand sides.

        ``warm_start`` may be a previous :class:`QpSolution`; its active set
        seeds the first polish and its iterates seed the ADMM loop.
        """
        n = self.n
        f = np.asarray(f, float).reshape(-1)
        h = np.zeros(0) if h is None else np.asarray(h, float).reshape(-1)
        e = np.zeros(0) if e is None else np.asarray(e, float).reshape(-1)
        if h.size != self.m_in or e.size != self.m_eq:
            raise ValueError("right-hand side sizes do not match the workspace")

        guess = [] if warm_start is None else list(warm_start.active_set)
        pol = self._polish(f, h, e, guess, tol) if initial_polish else None
        if pol is not None:
            z, y_in, y_eq, active = pol
            return self._package(z, y_in, y_eq, f, h, e, OPTIMAL, 0, True, active)

        A, s = self.A, self.row_scale
        lo = np.concatenate([np.full(self.m_in, -np.inf), e * s[self.m_in:]])
        up = np.concatenate([h * s[: self.m_in], e * s[self.m_in:]])
        rho, sigma, a = self.rho_vec, self.sigma, self.relax
        if warm_start is not None and warm_start.z_star is not None and warm_start.y_ineq is not None:
            x = np.array(warm_start.z_star, float)
            y = np.concatenate([warm_start.y_ineq, warm_start.y_eq]) / s
            z = np.clip(A @ x, lo, up)
        else:
            x = np.zeros(n)
            z = np.clip(np.zeros(A.shape[0]), lo, up)
            y = np.zeros(A.shape[0])
        tried_polish_at = -1
        for it in range(1, max_iter + 1):
            x_prev, y_prev = x, y
            rhs = sigma * x - f + A.T @ (rho * z - y)
            xt = self._kinv @ rhs
            zt = A @ xt
            x = a * xt + (1 - a) * x
            zr = a * zt + (1 - a) * z
            z_new = np.minimum(np.maximum(zr + y / rho, lo), up)
            y = y + rho * (zr - z_new)
            z = z_new
            if it % CHECK_EVERY:
                continue
            Ax = A @ x
            r_prim = np.max(np.abs(Ax - z), initial=0.0)
            ATy = A.T @ y
            r_dual = np.max(np.abs(self.H @ x + f + ATy))
            # infeasibility certificates on the scaled problem
            dy = y - y_prev
            ndy = np.max(np.abs(dy), initial=0.0)
            if ndy > INFEAS_TOL:
                lo_ok = np.all(dy[: self.m_in] >= -INFEAS_TOL * ndy)
                if lo_ok:
                    dyp, dym = np.maximum(dy, 0), np.minimum(dy, 0)
                    finite_lo = np.where(np.isfinite(lo), lo, 0.0)
                    lin = up @ dyp + finite_lo @ dym
                    if np.max(np.abs(A.T @ dy)) <= INFEAS_TOL * ndy and lin <= -INFEAS_TOL * ndy:
                        return self._package(x, np.zeros(self.m_in), np.zeros(self.m_eq), f, h, e, INFEASIBLE, it, False, [])
            dx = x - x_prev
            ndx = np.max(np.abs(dx))
            if ndx > INFEAS_TOL:
                Adx = A @ dx
                if (
                    np.max(np.abs(self.H @ dx)) <= INFEAS_TOL * ndx
                    and f @ dx <= -INFEAS_TOL * ndx
                    and np.all(Adx[: self.m_in] <= INFEAS_TOL * ndx)
                    and np.all(np.abs(Adx[self.m_in:]) <= INFEAS_TOL * ndx)
                ):
                    return self._package(x, np.zeros(self.m_in), np.zeros(self.m_eq), f, h, e, UNBOUNDED, it, False, [])
            loose = max(1e-3, 1e3 * tol)
            if (r_prim <= loose and r_dual <= loose and it - tried_polish_at >= 5 * CHECK_EVERY) or (
                r_prim <= tol and r_dual <= tol
            ):
                tried_polish_at = it
                y_u = y * s
                y_in_guess = y_u[: self.m_in]
                gap = up[: self.m_in] - z[: self.m_in]
                active = [int(i) for i in np.flatnonzero(gap < y[: self.m_in])]
                pol = self._polish(f, h, e, active, tol)
                if pol is not None:
                    zz, y_in, y_eq, act = pol
                    return self._package(zz, y_in, y_eq, f, h, e, OPTIMAL, it, True, act)
                if r_prim <= tol and r_dual <= tol:
                    sol = self._package(x, np.maximum(y_in_guess, 0), y_u[self.m_in:], f, h, e, OPTIMAL, it, False)
                    if sol.primal_residual <= tol * 10 and sol.dual_residual <= tol * 10:
                        return sol
        y_u = y * s
        return self._package(x, np.maximum(y_u[: self.m_in], 0), y_u[self.m_in:], f, h, e, MAX_ITER, max_iter, False)


def solve(
    qp: QuadraticProgram, tol: float = 1e-8, max_iter: int = MAX_ITERATIONS, warm_start=None, initial_polish: bool = True
) -> QpSolution:
    """Solve a :class:`QuadraticProgram`; deterministic given its inputs."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    solver = QpSolver(qp.h_matrix, qp.G, qp.E)
    return solver.solve(
        qp.f_vector, qp.h, qp.e, tol=tol, max_iter=max_iter, warm_start=warm_start, initial_polish=initial_polish
    )


def solve_lp(c, G=None, h=None, E=None, e=None, tol: float = 1e-8, max_iter: int = MAX_ITERATIONS) -> QpSolution:
    """Minimise ``c'z`` as a QP with ``H = 1e-9 I``, then polish to a vertex.

    The vertex polish re-solves the active rows without the regulariser when
    they pin down a unique point.
    """
    c = np.asarray(c, float).reshape(-1)
    n = c.size
    qp = QuadraticProgram(LP_REG * np.eye(n), c, G, h, E, e)
    sol = solve(qp, tol=tol, max_iter=max_iter)
    if sol.status != OPTIMAL:
        return sol
    C = np.vstack([qp.G[sol.active_set], qp.E])
    rhs = np.concatenate([qp.h[sol.active_set], qp.e])
    if C.shape[0] >= n and np.linalg.matrix_rank(C) == n:
        z, *_ = np.linalg.lstsq(C, rhs, rcond=None)
        if np.all(qp.G @ z <= qp.h + 1e-9 * (1 + np.abs(qp.h))) and np.allclose(qp.E @ z, qp.e, atol=1e-9):
            sol.z_star = z
    sol.objective = float(c @ sol.z_star)
    return sol
