"""Stochastic MPC with an affine-in-the-disturbance input policy.

Predicted inputs are ``u_i = v_i + sum_{j<i} M_ij w_j``.  The expected
quadratic cost is minimised subject to the state-input constraints holding
for every disturbance sequence and the terminal state landing in the
maximal RPI set of ``A + BK``.  Because the predictions are affine in the
disturbances, robust constraints are exact when written for every vertex
combination of ``W``.

The decision vector is ``z = [v_0, ..., v_{N-1}, vec M_10, vec M_20, vec M_21, ...]``
and every constraint has the form ``G z <= h0 + Fx x``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import linprog

from . import lti, qpcore, setalg
from .dist import DisturbanceModel, second_moment
from .setalg import Polytope

M_RIDGE = 1e-10
FAST_TOL = 1e-10
QP_TOL = 1e-9


class DesignError(ValueError):
    """Offline construction failed (empty terminal set, infeasible at 0)."""


class InfeasibleStateError(RuntimeError):
    """The state is outside the feasible set of the online problem."""

    def __init__(self, message, x=None, status=None):
        super().__init__(message)
        self.x = x
        self.status = status


@dataclass
class PolicyDecision:
    """Optimal policy parameters at one state.

    ``m_gains[i, j]`` is ``M_ij`` (``m x q``); entries with ``j >= i`` are zero.
    """

    v_sequence: np.ndarray
    m_gains: np.ndarray
    objective: float
    status: str
    active_set_size: int = 0
    fast_path: bool = False
    solution: qpcore.QpSolution | None = field(default=None, repr=False)


def _split_z(z_set: Polytope, n: int, m: int):
    if z_set.dim != n + m:
        raise DesignError(f"constraint set must live in R^{n + m} (x, u), got dim {z_set.dim}")
    A = np.asarray(z_set.A)
    return A[:, :n], A[:, n:], np.asarray(z_set.b)


def _m_offsets(N, m, q):
    off, pos = {}, N * m
    for i in range(1, N):
        for j in range(i):
            off[i, j] = pos
            pos += m * q
    return off, pos


def _dedupe_rows(G, h0, Fx):
    key = np.round(np.hstack([G, h0[:, None], Fx]), 12)
    _, idx = np.unique(key, axis=0, return_index=True)
    idx = np.sort(idx)
    return G[idx], h0[idx], Fx[idx]


class AffinePolicyProblem:
    """Prebuilt parametric QP for the affine disturbance-feedback controller.

    Construct with :func:`build`.  Immutable after construction except for
    the QP workspace, which :meth:`clone` duplicates for other workers.
    """

    def __init__(self, sys, z_set, horizon, q_matrix, r_matrix, riccati, terminal_set, dist_model, sigma_w):
        self.sys = sys
        self.z_set = z_set
        self.horizon = int(horizon)
        self.q_matrix = q_matrix
        self.r_matrix = r_matrix
        self.riccati = riccati
        self.terminal_set = terminal_set
        self.dist_model = dist_model
        self.sigma_w = sigma_w
        self._assemble()

    # ------------------------------------------------------------------
    @property
    def k_gain(self):
        return self.riccati.k_gain

    @property
    def p_matrix(self):
        return self.riccati.p_matrix

    @property
    def phi(self):
        return self.sys.a_matrix + self.sys.b_matrix @ self.k_gain

    @property
    def n_decision(self) -> int:
        return self._nz

    def _sel(self, i, j, d):
        """``M_ij d`` as an ``m x nz`` map of the decision vector."""
        m, q = self.sys.m, self.sys.q
        S = np.zeros((m, self._nz))
        o = self._moff[i, j]
        for r in range(m):
            S[r, o + r * q: o + (r + 1) * q] = d
        return S

    def _assemble(self):
        sys, N = self.sys, self.horizon
        A, B, D = sys.a_matrix, sys.b_matrix, sys.d_matrix
        n, m, q = sys.n, sys.m, sys.q
        Q, R, P = self.q_matrix, self.r_matrix, self.p_matrix
        self._moff, nz = _m_offsets(N, m, q)
        self._nz = nz
        nv = N * m

        # nominal predictions x_i = Ax[i] x + Xv[i] z, v_i = Sv[i] z
        Sv = []
        for i in range(N):
            S = np.zeros((m, nz))
            S[:, i * m:(i + 1) * m] = np.eye(m)
            Sv.append(S)
        Ax = [np.eye(n)]
        Xv = [np.zeros((n, nz))]
        for i in range(N):
            Ax.append(A @ Ax[-1])
            Xv.append(A @ Xv[-1] + B @ Sv[i])

        # disturbance responses, linear in the direction d of w_j:
        # x_i gets cx[i, j] d + (Lx[i, j] . d) z, u_i gets (Lu[i, j] . d) z
        cx, Lx, Lu = {}, {}, {}
        for j in range(N):
            for c in range(q):
                d = np.zeros(q)
                d[c] = 1.0
                const = D @ d
                lin = np.zeros((n, nz))
                for i in range(j + 1, N + 1):
                    if i > j + 1:
                        const = A @ const
                        lin = A @ lin + B @ self._sel(i - 1, j, d)
                    cx.setdefault((i, j), np.zeros((n, q)))[:, c] = const
                    Lx.setdefault((i, j), np.zeros((n, nz, q)))[:, :, c] = lin
                    if i < N:
                        Lu.setdefault((i, j), np.zeros((m, nz, q)))[:, :, c] = self._sel(i, j, d)

        # expected cost: 0.5 z'Hz + (f0 + Fc x)'z + x'Cxx x + c0
        H = np.zeros((nz, nz))
        Fc = np.zeros((nz, n))
        Cxx = np.zeros((n, n))
        for i in range(N + 1):
            Wt = Q if i < N else P
            H += 2 * Xv[i].T @ Wt @ Xv[i]
            Fc += 2 * Xv[i].T @ Wt @ Ax[i]
            Cxx += Ax[i].T @ Wt @ Ax[i]
            if i < N:
                H += 2 * Sv[i].T @ R @ Sv[i]
        evals, evecs = np.linalg.eigh(self.sigma_w)
        roots = evecs * np.sqrt(np.clip(evals, 0.0, None))
        f0 = np.zeros(nz)
        c0 = 0.0
        for j in range(N):
            for k in range(q):
                ell = roots[:, k]
                if not np.any(ell):
                    continue
                for i in range(j + 1, N + 1):
                    Wt = Q if i < N else P
                    cv = cx[i, j] @ ell
                    Lv = Lx[i, j] @ ell
                    H += 2 * Lv.T @ Wt @ Lv
                    f0 += 2 * Lv.T @ Wt @ cv
                    c0 += float(cv @ Wt @ cv)
                    if i < N:
                        Lu_v = Lu[i, j] @ ell
                        H += 2 * Lu_v.T @ R @ Lu_v
        H[nv:, nv:] += M_RIDGE * np.eye(nz - nv)
        H = 0.5 * (H + H.T)
        self._H, self._f0, self._Fc, self._Cxx, self._c0 = H, f0, Fc, Cxx, c0

        # robust constraints, one replica per vertex combination
        Zx, Zu, zb = _split_z(self.z_set, n, m)
        V = self.dist_model.support.vertices()
        self.n_vertices = len(V)
        blocks_G, blocks_h, blocks_F = [], [], []
        replicas = []

        def add_stage(i, ax, au, bb):
            G = ax @ Xv[i] + (au @ Sv[i] if au is not None else 0.0)
            G = np.broadcast_to(G, (1,) + G.shape)
            h = bb[None, :].copy()
            for j in range(i):
                gj = np.einsum("rn,nzc,vc->vrz", ax, Lx[i, j], V)
                if au is not None:
                    gj = gj + np.einsum("rm,mzc,vc->vrz", au, Lu[i, j], V)
                hj = -np.einsum("rn,nc,vc->vr", ax, cx[i, j], V)
                G = (G[:, None] + gj[None]).reshape(-1, *G.shape[1:])
                h = (h[:, None] + hj[None]).reshape(-1, h.shape[1])
            replicas.append(G.shape[0])
            Fx = np.broadcast_to(-ax @ Ax[i], (G.shape[0],) + (ax.shape[0], n))
            blocks_G.append(G.reshape(-1, nz))
            blocks_h.append(h.reshape(-1))
            blocks_F.append(Fx.reshape(-1, n))

        for i in range(N):
            add_stage(i, Zx, Zu, zb)
        add_stage(N, np.asarray(self.terminal_set.A), None, np.asarray(self.terminal_set.b))
        self.stage_replicas = replicas
        G = np.vstack(blocks_G)
        h0 = np.concatenate(blocks_h)
        Fx = np.vstack(blocks_F)
        G, h0, Fx = _dedupe_rows(G, h0, Fx)

        zero = np.linalg.norm(G, axis=1) <= 1e-14
        const = zero & (np.linalg.norm(Fx, axis=1) <= 1e-14)
        if np.any(h0[const] < -1e-9):
            raise DesignError("robust constraints are infeasible for every state: disturbance too large for the constraints")
        xonly = zero & ~const
        self._xonly_A, self._xonly_b = -Fx[xonly], h0[xonly]
        keep = ~zero
        self._G, self._h0, self._Fx = G[keep], h0[keep], Fx[keep]

        # unconstrained minimiser z = z0 + Kz x and its validity region
        chol = cho_factor(H)
        self._z0 = -cho_solve(chol, f0)
        self._Kz = -cho_solve(chol, Fc)
        self._fast_A = np.vstack([self._G @ self._Kz - self._Fx, self._xonly_A])
        self._fast_b = np.concatenate([self._h0 - self._G @ self._z0, self._xonly_b])
        self._solver = qpcore.QpSolver(H, self._G)

    # ------------------------------------------------------------------
    def clone(self) -> "AffinePolicyProblem":
        """Copy sharing all immutable data but owning a fresh QP workspace."""
        new = object.__new__(AffinePolicyProblem)
        new.__dict__.update(self.__dict__)
        new._solver = qpcore.QpSolver(self._H, self._G)
        return new

    def qp_instance(self, x) -> qpcore.QuadraticProgram:
        x = np.asarray(x, float).reshape(-1)
        G = np.vstack([self._G, np.zeros((len(self._xonly_b), self._nz))])
        h = np.concatenate([self._h0 + self._Fx @ x, self._xonly_b - self._xonly_A @ x])
        return qpcore.QuadraticProgram(self._H, self._f0 + self._Fc @ x, G, h)

    def expected_cost(self, x, z) -> float:
        x = np.asarray(x, float).reshape(-1)
        return float(0.5 * z @ self._H @ z + (self._f0 + self._Fc @ x) @ z + x @ self._Cxx @ x + self._c0)

    def unpack(self, z):
        N, m, q = self.horizon, self.sys.m, self.sys.q
        v = z[: N * m].reshape(N, m)
        M = np.zeros((N, N, m, q))
        for (i, j), o in self._moff.items():
            M[i, j] = z[o:o + m * q].reshape(m, q)
        return v, M

    def fast_mask(self, X) -> np.ndarray:
        """Rows of ``X`` where the unconstrained minimiser is feasible (hence optimal)."""
        return np.all(lti.batch_matvec(X, self._fast_A) <= self._fast_b + FAST_TOL, axis=1)

    def fast_inputs(self, X) -> np.ndarray:
        m = self.sys.m
        return lti.batch_matvec(X, self._Kz[:m]) + self._z0[:m]

    def solve_z(self, x, warm_start=None):
        """Optimal decision vector at ``x``; returns ``(z, QpSolution | None)``."""
        x = np.asarray(x, float).reshape(-1)
        if np.any(self._xonly_A @ x > self._xonly_b + FAST_TOL):
            raise InfeasibleStateError("state violates a disturbance-independent constraint", x, qpcore.INFEASIBLE)
        if self.fast_mask(x[None])[0]:
            return self._z0 + self._Kz @ x, None
        sol = self._solver.solve(self._f0 + self._Fc @ x, self._h0 + self._Fx @ x, tol=QP_TOL, warm_start=warm_start)
        if sol.status != qpcore.OPTIMAL:
            raise InfeasibleStateError(f"online problem not solved at x={x.tolist()}: {sol.status}", x, sol.status)
        return sol.z_star, sol


def build(sys: lti.LinearSystem, z_set: Polytope, horizon: int, q_matrix, r_matrix, dist_model: DisturbanceModel, terminal_set: Polytope | None = None) -> AffinePolicyProblem:
    """Assemble the controller: Riccati pair, terminal set and robust QP template.

    The terminal set defaults to the maximal RPI subset of
    ``{x : (x, Kx) in Z}`` for ``A + BK``; it is certified RPI and
    admissible before use.
    """
    if horizon < 1:
        raise DesignError("horizon must be at least 1")
    if dist_model.dim != sys.q:
        raise DesignError(f"disturbance has dimension {dist_model.dim}, D has {sys.q} columns")
    Q = np.atleast_2d(np.asarray(q_matrix, float))
    R = np.atleast_2d(np.asarray(r_matrix, float))
    if np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T))) < -1e-12:
        raise DesignError("Q must be positive semidefinite")
    ric = lti.dare(sys, Q, R)
    K = ric.k_gain
    phi = sys.a_matrix + sys.b_matrix @ K
    Zx, Zu, zb = _split_z(z_set, sys.n, sys.m)
    W = dist_model.support
    if terminal_set is None:
        x_k = Polytope(Zx + Zu @ K, zb)
        try:
            terminal_set = setalg.max_rpi(phi, sys.d_matrix, W, x_k)
        except setalg.GeometryError as exc:
            raise DesignError(f"terminal set is empty: {exc}") from exc
    ok, viol = setalg.certify_rpi(terminal_set, phi, sys.d_matrix, W)
    if not ok:
        raise DesignError(f"terminal set is not RPI for A + BK (violation {viol:.3g})")
    adm = setalg.support_vertices(terminal_set, Zx + Zu @ K) - zb
    if np.max(adm) > setalg.SET_TOL:
        raise DesignError("terminal set violates the constraints under u = Kx")
    prob = AffinePolicyProblem(sys, z_set, horizon, Q, R, ric, terminal_set, dist_model, second_moment(dist_model))
    try:
        prob.solve_z(np.zeros(sys.n))
    except InfeasibleStateError as exc:
        raise DesignError("online problem is infeasible at the origin") from exc
    return prob


def control(prob: AffinePolicyProblem, x, warm_start=None):
    """Receding-horizon input ``u = v_0*`` and the full optimal decision."""
    x = np.asarray(x, float).reshape(-1)
    z, sol = prob.solve_z(x, warm_start)
    v, M = prob.unpack(z)
    dec = PolicyDecision(
        v_sequence=v,
        m_gains=M,
        objective=prob.expected_cost(x, z),
        status=qpcore.OPTIMAL,
        active_set_size=0 if sol is None else len(sol.active_set),
        fast_path=sol is None,
        solution=sol,
    )
    return v[0].copy(), dec


def feasible_set_probe(prob: AffinePolicyProblem, x) -> bool:
    """True iff the online problem is feasible at ``x`` (zero-objective LP)."""
    x = np.asarray(x, float).reshape(-1)
    if np.any(prob._xonly_A @ x > prob._xonly_b + FAST_TOL):
        return False
    if prob.fast_mask(x[None])[0]:
        return True
    # HiGHS decides infeasibility in a few pivots where ADMM needs many iterations
    res = linprog(
        np.zeros(prob.n_decision), A_ub=prob._G, b_ub=prob._h0 + prob._Fx @ x,
        bounds=[(None, None)] * prob.n_decision, method="highs",
    )
    return res.status == 0


def vertex_replicas(n_vertices: int, horizon: int) -> list:
    """Constraint copies per stage under vertex enumeration: ``n_vertices**i``."""
    return [n_vertices**i for i in range(horizon + 1)]


def lqr_policy(prob: AffinePolicyProblem, x) -> np.ndarray:
    """Decision vector reproducing ``u = Kx`` along every disturbance path."""
    x = np.asarray(x, float).reshape(-1)
    sys, N = prob.sys, prob.horizon
    K, phi = prob.k_gain, prob.phi
    z = np.zeros(prob.n_decision)
    xi = x.copy()
    for i in range(N):
        z[i * sys.m:(i + 1) * sys.m] = K @ xi
        xi = phi @ xi
    for (i, j), o in prob._moff.items():
        z[o:o + sys.m * sys.q] = (K @ np.linalg.matrix_power(phi, i - 1 - j) @ sys.d_matrix).reshape(-1)
    return z


def design_to_json(prob: AffinePolicyProblem) -> dict:
    return {
        "controller": "affine",
        "system": prob.sys.to_json(),
        "horizon": prob.horizon,
        "Q": prob.q_matrix.tolist(),
        "R": prob.r_matrix.tolist(),
        "P": prob.p_matrix.tolist(),
        "K": prob.k_gain.tolist(),
        "constraints": prob.z_set.to_json(),
        "terminal_set": prob.terminal_set.to_json(),
        "disturbance": prob.dist_model.to_json(),
        "stage_replicas": prob.stage_replicas,
        "n_qp_rows": int(prob._G.shape[0]),
        "n_decision": prob.n_decision,
    }


def design_from_json(obj) -> AffinePolicyProblem:
    sys = lti.LinearSystem.from_json(obj["system"])
    return build(
        sys,
        Polytope.from_json(obj["constraints"]),
        obj["horizon"],
        obj["Q"],
        obj["R"],
        DisturbanceModel.from_json(obj["disturbance"]),
        terminal_set=Polytope.from_json(obj["terminal_set"]),
    )
