"""Stochastic MPC with striped disturbance feedback and offline tightening.

Predicted inputs are ``u_i = K x_i + c_i + sum_{d=1}^{min(i, N-1)} L_d w_{i-d}``
with ``c_i = 0`` for ``i >= N``.  The gains ``L_d`` depend only on the
delay, so the response of the state to a disturbance ``d`` steps back is
the fixed matrix ``R_d``::

    R_1 = D,   R_{d+1} = Phi R_d + B L_d,   L_d = 0 for d >= N

and every constraint row is tightened offline by the worst case of the
past disturbances.  Online, only the perturbation sequence ``c`` is
optimised: ``min x'Px + c'P_c c`` over nominal predictions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag
from scipy.optimize import linprog

from . import lti, qpcore, setalg
from .dist import DisturbanceModel, sample, stream
from .setalg import Polytope

log = logging.getLogger(__name__)

GAIN_L1_WEIGHT = 1e-8
FAST_TOL = 1e-10
QP_TOL = 1e-9
N2_CAP = 200
MIN_QUANTILE_SAMPLES = 10_000
A5_TOL = 1e-6


class DesignError(ValueError):
    pass


class InfeasibleStateError(RuntimeError):
    def __init__(self, message, x=None, status=None):
        super().__init__(message)
        self.x = x
        self.status = status


@dataclass(frozen=True)
class ChanceConstraintSpec:
    """Rows ``P{f_j'x_{k+1} + g_j'u_k <= h_j} >= p_j``."""

    f: np.ndarray
    g: np.ndarray
    h: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        f = np.atleast_2d(np.asarray(self.f, float))
        g = np.atleast_2d(np.asarray(self.g, float))
        h = np.asarray(self.h, float).reshape(-1)
        p = np.asarray(self.p, float).reshape(-1)
        if not (f.shape[0] == g.shape[0] == h.size == p.size):
            raise DesignError("chance constraint arrays disagree on the number of rows")
        if np.any(p <= 0) or np.any(p > 1):
            raise DesignError("probabilities must lie in (0, 1]")
        for k, v in (("f", f), ("g", g), ("h", h), ("p", p)):
            object.__setattr__(self, k, v)

    @property
    def n_rows(self) -> int:
        return self.h.size

    @classmethod
    def empty(cls, n, m):
        return cls(np.zeros((0, n)), np.zeros((0, m)), np.zeros(0), np.zeros(0))

    def to_json(self) -> dict:
        return {"f": self.f.tolist(), "g": self.g.tolist(), "h": self.h.tolist(), "p": self.p.tolist()}

    @classmethod
    def from_json(cls, obj, n=None, m=None):
        if not obj or not obj.get("h"):
            return cls.empty(n, m)
        return cls(obj["f"], obj["g"], obj["h"], obj["p"])


def tighten_probabilistic(spec: ChanceConstraintSpec, sys: lti.LinearSystem, dist_model: DisturbanceModel, n_samples: int = 100_000, rng=None) -> np.ndarray:
    """Offsets ``gamma_j`` so that ``f_j'(Ax + Bu) + g_j'u + gamma_j <= h_j`` implies the chance constraint.

    ``gamma_j`` is the empirical quantile of ``f_j'D w`` at level
    ``p_j + 3 se`` with ``se = sqrt(p_j (1 - p_j) / n)``, i.e. the
    ``p_j``-quantile pushed out by three binomial standard errors along the
    empirical CDF.  Levels reaching 1 use the exact support value.  Offsets
    are floored at zero.
    """
    if n_samples < MIN_QUANTILE_SAMPLES:
        raise ValueError(f"n_samples must be at least {MIN_QUANTILE_SAMPLES}")
    if spec.n_rows == 0:
        return np.zeros(0)
    rng = stream(dist_model.seed, 0x9A77A) if rng is None else rng
    W = sample(dist_model, rng, n_samples)
    fD = spec.f @ sys.d_matrix
    V = dist_model.support.vertices()
    gam = np.zeros(spec.n_rows)
    for j in range(spec.n_rows):
        if np.max(np.abs(fD[j])) <= 1e-14:
            continue
        worst = float(np.max(V @ fD[j]))
        p = spec.p[j]
        level = p + 3.0 * np.sqrt(p * (1.0 - p) / n_samples)
        if level >= 1.0:
            gam[j] = worst
        else:
            gam[j] = min(worst, float(np.quantile(W @ fD[j], level, method="higher")))
    return np.maximum(gam, 0.0)


@dataclass
class ConstraintRows:
    """All constraint rows as ``ax x + au u <= b`` on the current (x, u)."""

    ax: np.ndarray
    au: np.ndarray
    b: np.ndarray
    kind: list

    @property
    def n(self) -> int:
        return self.b.size


def _rows(sys, z_set: Polytope, spec: ChanceConstraintSpec, gamma) -> ConstraintRows:
    n, m = sys.n, sys.m
    if z_set.dim != n + m:
        raise DesignError(f"constraint set must live in R^{n + m} (x, u), got dim {z_set.dim}")
    A = np.asarray(z_set.A)
    ax = [A[:, :n]]
    au = [A[:, n:]]
    b = [np.asarray(z_set.b)]
    kind = ["hard"] * z_set.n_halfspaces
    if spec.n_rows:
        ax.append(spec.f @ sys.a_matrix)
        au.append(spec.f @ sys.b_matrix + spec.g)
        b.append(spec.h - gamma)
        kind += ["prob"] * spec.n_rows
    return ConstraintRows(np.vstack(ax), np.vstack(au), np.concatenate(b), kind)


def _support_w(V, vec):
    """``h_W`` of each row of ``vec`` (rows x q) from the vertex list of ``W``."""
    return np.max(np.atleast_2d(vec) @ V.T, axis=1)


def synthesize_gains(sys, K, rows: ConstraintRows, W: Polytope, horizon: int):
    """Delay gains ``L_1..L_{N-1}`` chosen one at a time by LP.

    ``L_j`` minimises the total tightening of all rows at prediction step
    ``j + 1`` with ``L_1..L_{j-1}`` fixed and later gains zero.  It enters
    the input response at delay ``j`` and the state response at delay
    ``j + 1``.  A tiny l1 weight on the entries selects the smallest gain
    among ties (so ``D = 0`` gives ``L = 0``).  Returns the gains and the
    per-row contributions at each step.
    """
    A, B, D = sys.a_matrix, sys.b_matrix, sys.d_matrix
    m, q = sys.m, sys.q
    phi = A + B @ K
    V = W.vertices()
    nv = len(V)
    rx = rows.ax + rows.au @ K  # row acting on x with u = Kx
    nr = rows.n
    gains, contributions = [], []
    R = D.copy()
    nl = m * q
    for _ in range(1, horizon):
        # term 1: rows.au L + rx R   (input response at delay j)
        # term 2: rx B L + rx phi R  (state response at delay j + 1)
        terms = []
        for C_row, c0 in ((rows.au, rx @ R), (rx @ B, rx @ phi @ R)):
            for r in range(nr):
                Cl = np.zeros((q, nl))
                for i in range(m):
                    Cl[:, i * q:(i + 1) * q] = C_row[r, i] * np.eye(q)
                terms.append((Cl, c0[r]))
        nt = len(terms)
        # variables: l (nl), t (nt), s (nl)
        nvar = nl + nt + nl
        cost = np.concatenate([np.zeros(nl), np.ones(nt), np.full(nl, GAIN_L1_WEIGHT)])
        A_ub, b_ub = [], []
        for k, (Cl, c0) in enumerate(terms):
            for v in V:
                row = np.zeros(nvar)
                row[:nl] = v @ Cl
                row[nl + k] = -1.0
                A_ub.append(row)
                b_ub.append(-(c0 @ v))
        for i in range(nl):
            for sgn in (1.0, -1.0):
                row = np.zeros(nvar)
                row[i] = sgn
                row[nl + nt + i] = -1.0
                A_ub.append(row)
                b_ub.append(0.0)
        res = linprog(cost, A_ub=np.array(A_ub), b_ub=np.array(b_ub), bounds=[(None, None)] * nvar, method="highs")
        if res.status != 0:
            raise DesignError(f"gain synthesis LP failed: {res.message}")
        L = res.x[:nl].reshape(m, q)
        L[np.abs(L) < 1e-13] = 0.0
        gains.append(L)
        R_next = phi @ R + B @ L
        contrib = _support_w(V, rows.au @ L + rx @ R) + _support_w(V, rx @ R_next)
        contributions.append(contrib)
        log.debug("gain %d per-row tightening %s", len(gains), contrib)
        R = R_next
    return gains, contributions


def responses(sys, K, gains, n_delays: int):
    """State responses ``R_1..R_n`` and input responses ``K R_d + L_d``."""
    phi = sys.a_matrix + sys.b_matrix @ K
    R = [sys.d_matrix.copy()]
    U = []
    for d in range(1, n_delays + 1):
        L = gains[d - 1] if d - 1 < len(gains) else np.zeros((sys.m, sys.q))
        U.append(K @ R[-1] + L)
        if d < n_delays:
            R.append(phi @ R[-1] + sys.b_matrix @ L)
    return R, U


def stage_offsets(sys, K, gains, rows: ConstraintRows, W: Polytope, n_stages: int):
    """Cumulative worst-case tightening ``t_i`` (stages x rows), ``t_0 = 0``."""
    V = W.vertices()
    R, U = responses(sys, K, gains, max(n_stages - 1, 1))
    t = np.zeros((n_stages, rows.n))
    for i in range(1, n_stages):
        d = i - 1
        t[i] = t[i - 1] + _support_w(V, rows.ax @ R[d] + rows.au @ U[d])
    return t


def limit_offsets(sys, K, gains, rows: ConstraintRows, W: Polytope, horizon: int, rel_tol: float = 1e-15, max_terms: int = 100_000):
    """``t_inf``: the offsets summed until the geometric tail is negligible."""
    V = W.vertices()
    phi = sys.a_matrix + sys.b_matrix @ K
    R, U = responses(sys, K, gains, horizon + 1)
    t = np.zeros(rows.n)
    for d in range(len(R)):
        t += _support_w(V, rows.ax @ R[d] + rows.au @ U[d])
    Rd = R[-1]
    rx = rows.ax + rows.au @ K
    for _ in range(max_terms):
        Rd = phi @ Rd
        add = _support_w(V, rx @ Rd)
        t += add
        if np.max(add) <= rel_tol * max(1.0, np.max(t)):
            break
    # remainder bound: the added terms shrink at least geometrically
    rho = lti.spectral_radius(phi)
    return t + np.max(add) * rho / max(1e-12, 1.0 - rho) + 1e-12


@dataclass
class StripedDesign:
    """Offline design: gains, tightened rows per stage, QP template."""

    sys: lti.LinearSystem
    z_set: Polytope
    chance: ChanceConstraintSpec
    dist_model: DisturbanceModel
    q_matrix: np.ndarray
    r_matrix: np.ndarray
    p_matrix: np.ndarray
    k_gain: np.ndarray
    horizon: int
    gains: list
    gamma: np.ndarray
    rows: ConstraintRows
    offsets: np.ndarray  # (N + N2) x rows
    t_inf: np.ndarray
    n2: int
    gain_contributions: list = field(default_factory=list)

    def __post_init__(self):
        self._assemble()

    @property
    def phi(self):
        return self.sys.a_matrix + self.sys.b_matrix @ self.k_gain

    @property
    def p_c(self):
        Bm = self.sys.b_matrix
        blk = self.r_matrix + Bm.T @ self.p_matrix @ Bm
        return block_diag(*[blk] * self.horizon)

    def tightened_rhs(self, i: int) -> np.ndarray:
        """Right-hand sides of all rows at prediction stage ``i``."""
        return self.rows.b - self.offsets[i]

    def _assemble(self):
        sys, N = self.sys, self.horizon
        n, m = sys.n, sys.m
        phi, B, K = self.phi, sys.b_matrix, self.k_gain
        T = N + self.n2
        nz = N * m
        rx = self.rows.ax + self.rows.au @ K
        Gs, hs, Fs = [], [], []
        Xc = np.zeros((n, nz))
        phi_i = np.eye(n)
        for i in range(T):
            Sc = np.zeros((m, nz))
            if i < N:
                Sc[:, i * m:(i + 1) * m] = np.eye(m)
            Gs.append(rx @ Xc + self.rows.au @ Sc)
            hs.append(self.tightened_rhs(i))
            Fs.append(-rx @ phi_i)
            Xc = phi @ Xc + B @ Sc
            phi_i = phi @ phi_i
        G, h0, Fx = np.vstack(Gs), np.concatenate(hs), np.vstack(Fs)
        key = np.round(np.hstack([G, h0[:, None], Fx]), 12)
        _, idx = np.unique(key, axis=0, return_index=True)
        idx = np.sort(idx)
        G, h0, Fx = G[idx], h0[idx], Fx[idx]
        zero = np.linalg.norm(G, axis=1) <= 1e-14
        const = zero & (np.linalg.norm(Fx, axis=1) <= 1e-14)
        if np.any(h0[const] < 0):
            raise DesignError("a tightened constraint excludes every state")
        xonly = zero & ~const
        self._xonly_A, self._xonly_b = -Fx[xonly], h0[xonly]
        keep = ~zero
        self._G, self._h0, self._Fx = G[keep], h0[keep], Fx[keep]
        # c = 0 is optimal iff feasible: -Fx x <= h0 on every row
        self.uc_A = np.vstack([-self._Fx, self._xonly_A])
        self.uc_b = np.concatenate([self._h0, self._xonly_b])
        self._H = 2.0 * self.p_c
        self._solver = qpcore.QpSolver(self._H, self._G)

    def clone(self) -> "StripedDesign":
        new = object.__new__(StripedDesign)
        new.__dict__.update(self.__dict__)
        new._solver = qpcore.QpSolver(self._H, self._G)
        return new

    def unconstrained_region(self) -> Polytope:
        """``{x : c = 0 is feasible}``, on which ``c* = 0``."""
        return Polytope(self.uc_A, self.uc_b, check=False)

    def fast_mask(self, X) -> np.ndarray:
        return np.all(lti.batch_matvec(X, self.uc_A) <= self.uc_b + FAST_TOL, axis=1)

    def fast_inputs(self, X) -> np.ndarray:
        return lti.batch_matvec(X, self.k_gain)

    def solve_c(self, x, warm_start=None):
        """Optimal perturbation sequence at ``x``; returns ``(c, QpSolution | None)``."""
        x = np.asarray(x, float).reshape(-1)
        if np.any(self._xonly_A @ x > self._xonly_b + FAST_TOL):
            raise InfeasibleStateError("state violates an untightened state constraint", x, qpcore.INFEASIBLE)
        if self.fast_mask(x[None])[0]:
            return np.zeros(self.horizon * self.sys.m), None
        sol = self._solver.solve(np.zeros(self._H.shape[0]), self._h0 + self._Fx @ x, tol=QP_TOL, warm_start=warm_start)
        if sol.status != qpcore.OPTIMAL:
            raise InfeasibleStateError(f"online problem not solved at x={x.tolist()}: {sol.status}", x, sol.status)
        return sol.z_star, sol

    def value(self, x, c) -> float:
        x = np.asarray(x, float).reshape(-1)
        return float(x @ self.p_matrix @ x + c @ self.p_c @ c)

    def feedback_matrix(self, n_steps: int) -> np.ndarray:
        """Block matrix mapping ``(w_0..w_{T-1})`` to the disturbance-feedback part of ``(u_0..u_{T-1})``."""
        m, q, N = self.sys.m, self.sys.q, self.horizon
        Lm = np.zeros((n_steps * m, n_steps * q))
        for i in range(n_steps):
            for d in range(1, min(i, N - 1) + 1):
                Lm[i * m:(i + 1) * m, (i - d) * q:(i - d + 1) * q] = self.gains[d - 1]
        return Lm


def _find_n2(design_parts, cap: int):
    """Smallest ``N2`` with the stage-``N+N2`` rows (limit offsets) implied by stages ``N..N+N2-1``.

    Offsets are nondecreasing in the stage, so if ``y`` satisfies stages
    ``0..N2-1`` (counted from ``N``) then so does ``Phi y``; the implication
    then propagates to every later stage.
    """
    sys, K, rows, offsets_fn, N, t_inf = design_parts
    phi = sys.a_matrix + sys.b_matrix @ K
    rx = rows.ax + rows.au @ K
    n = sys.n
    offsets = offsets_fn(N + cap + 1)
    A_blocks, b_blocks = [], []
    phi_l = np.eye(n)
    for n2 in range(1, cap + 1):
        A_blocks.append(rx @ phi_l)
        b_blocks.append(rows.b - offsets[N + n2 - 1])
        phi_l = phi @ phi_l
        A_cur, b_cur = np.vstack(A_blocks), np.concatenate(b_blocks)
        ok = True
        for a, bb in zip(rx @ phi_l, rows.b - t_inf):
            if np.linalg.norm(a) <= 1e-14:
                if bb < 0:
                    raise DesignError("limit-tightened constraint excludes every state")
                continue
            try:
                val, _ = setalg._lp_max(a, A_cur, b_cur)
            except setalg.GeometryError:
                ok = False
                break
            if val > bb + 1e-9:
                ok = False
                break
        if ok:
            return n2
    raise DesignError(f"N2 search did not terminate within {cap} stages")


def design(
    sys: lti.LinearSystem,
    z_set: Polytope,
    horizon: int,
    q_matrix,
    r_matrix,
    dist_model: DisturbanceModel,
    chance: ChanceConstraintSpec | None = None,
    n_samples: int = 100_000,
    n2_cap: int = N2_CAP,
    gains=None,
    gamma=None,
) -> StripedDesign:
    """Offline synthesis: Riccati pair, gains, offsets, ``N2`` and the QP."""
    if horizon < 1:
        raise DesignError("horizon must be at least 1")
    if dist_model.dim != sys.q:
        raise DesignError(f"disturbance has dimension {dist_model.dim}, D has {sys.q} columns")
    Q = np.atleast_2d(np.asarray(q_matrix, float))
    R = np.atleast_2d(np.asarray(r_matrix, float))
    ric = lti.dare(sys, Q, R)
    K = ric.k_gain
    chance = ChanceConstraintSpec.empty(sys.n, sys.m) if chance is None else chance
    W = dist_model.support
    if gamma is None:
        gamma = tighten_probabilistic(chance, sys, dist_model, n_samples) if chance.n_rows else np.zeros(0)
    gamma = np.asarray(gamma, float)
    rows = _rows(sys, z_set, chance, gamma)
    contrib = []
    if gains is None:
        gains, contrib = synthesize_gains(sys, K, rows, W, horizon)
    gains = [np.atleast_2d(np.asarray(L, float)) for L in gains]
    t_inf = limit_offsets(sys, K, gains, rows, W, horizon)
    bad = np.flatnonzero(rows.b - t_inf <= 0)
    if bad.size:
        off = lambda s: stage_offsets(sys, K, gains, rows, W, s)
        t = off(horizon + n2_cap)
        first = int(np.argmax(np.any(rows.b - t <= 0, axis=1)))
        raise DesignError(f"tightened set excludes the origin from stage {first} (rows {bad.tolist()})")
    n2 = _find_n2((sys, K, rows, lambda s: stage_offsets(sys, K, gains, rows, W, s), horizon, t_inf), n2_cap)
    offsets = stage_offsets(sys, K, gains, rows, W, horizon + n2)
    out = StripedDesign(
        sys=sys, z_set=z_set, chance=chance, dist_model=dist_model, q_matrix=Q, r_matrix=R,
        p_matrix=ric.p_matrix, k_gain=K, horizon=int(horizon), gains=gains, gamma=gamma,
        rows=rows, offsets=offsets, t_inf=t_inf, n2=n2, gain_contributions=contrib,
    )
    try:
        out.solve_c(np.zeros(sys.n))
    except InfeasibleStateError as exc:
        raise DesignError("online problem is infeasible at the origin") from exc
    return out


def control(design: StripedDesign, x, warm_start=None):
    """``u = K x + c*_0`` and the optimal perturbation sequence (``N x m``)."""
    x = np.asarray(x, float).reshape(-1)
    c, _ = design.solve_c(x, warm_start)
    c = c.reshape(design.horizon, design.sys.m)
    return design.k_gain @ x + c[0], c


@dataclass
class Assumption5Report:
    passed: bool
    max_c0_norm: float
    witness: list | None
    n_points: int
    n_infeasible: int
    region_contains_mrpi: bool

    def to_json(self) -> dict:
        return {
            "passed": self.passed,
            "max_c0_norm": self.max_c0_norm,
            "witness": self.witness,
            "n_points": self.n_points,
            "n_infeasible": self.n_infeasible,
            "region_contains_mrpi": self.region_contains_mrpi,
        }


def check_assumption5(design: StripedDesign, mrpi: setalg.SetApproximation, n_probe: int = 1000, rng=None, tol: float = A5_TOL) -> Assumption5Report:
    """Probe the mRPI outer approximation for states where ``c*_0 != 0``.

    Points are the vertices plus ``n_probe`` random convex combinations of
    them.  Infeasible points count as failures with infinite norm.
    """
    omega = mrpi.outer
    V = omega.vertices()
    rng = stream(0, 0xA55) if rng is None else rng
    if n_probe and len(V) > 1:
        wts = rng.dirichlet(np.ones(len(V)), size=n_probe)
        pts = np.vstack([V, wts @ V])
    else:
        pts = V
    worst, witness, infeasible = 0.0, None, 0
    for x in pts:
        try:
            c, _ = design.solve_c(x)
            val = float(np.linalg.norm(c[: design.sys.m]))
        except InfeasibleStateError:
            infeasible += 1
            val = np.inf
        if val > worst:
            worst, witness = val, x.tolist()
    contains = bool(np.all(setalg.support_vertices(omega, design.uc_A) <= design.uc_b + FAST_TOL))
    return Assumption5Report(bool(worst <= tol), float(worst), witness, int(len(pts)), infeasible, contains)


def design_to_json(d: StripedDesign) -> dict:
    return {
        "controller": "striped",
        "system": d.sys.to_json(),
        "horizon": d.horizon,
        "n2": d.n2,
        "Q": d.q_matrix.tolist(),
        "R": d.r_matrix.tolist(),
        "P": d.p_matrix.tolist(),
        "K": d.k_gain.tolist(),
        "gains": [L.tolist() for L in d.gains],
        "gamma": d.gamma.tolist(),
        "constraints": d.z_set.to_json(),
        "chance": d.chance.to_json(),
        "disturbance": d.dist_model.to_json(),
        "row_kind": d.rows.kind,
        "offsets": d.offsets.tolist(),
        "t_inf": d.t_inf.tolist(),
        "gain_contributions": [c.tolist() for c in d.gain_contributions],
    }


def design_from_json(obj) -> StripedDesign:
    """Rebuild a design from its JSON form without re-running synthesis."""
    sys = lti.LinearSystem.from_json(obj["system"])
    return design(
        sys,
        Polytope.from_json(obj["constraints"]),
        obj["horizon"],
        obj["Q"],
        obj["R"],
        DisturbanceModel.from_json(obj["disturbance"]),
        chance=ChanceConstraintSpec.from_json(obj.get("chance"), sys.n, sys.m),
        gains=obj["gains"],
        gamma=obj["gamma"],
    )
