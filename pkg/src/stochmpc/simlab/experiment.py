"""Build systems, controllers and sets from a config; run experiments."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import convergence as cv
from .. import lti, setalg, smpc_affine, smpc_striped
from ..dist import DisturbanceModel, sample, second_moment, stream
from ..setalg import Polytope
from . import engine
from .config import ConfigError, ExperimentConfig
from .stats import TrajectoryStats, convergence_verdict, tail_average, trajectory_stats

STREAM_ISS_FIT = 3
STREAM_ISS_CHECK = 4


def build_system(cfg: ExperimentConfig) -> lti.LinearSystem:
    A = np.asarray(cfg.system.A, float)
    D = np.eye(A.shape[0]) if cfg.system.D is None else cfg.system.D
    return lti.LinearSystem(A, cfg.system.B, D)


def build_disturbance(cfg: ExperimentConfig) -> DisturbanceModel:
    d = cfg.disturbance
    return DisturbanceModel(d.kind, d.halfwidth, d.cov, d.seed)


def build_constraints(cfg: ExperimentConfig, sys: lti.LinearSystem) -> Polytope | None:
    c = cfg.constraints
    if c is None:
        return None
    n, m = sys.n, sys.m
    A_rows, b_rows = [], []
    for lo_name, hi_name, offset, size in (("x_lower", "x_upper", 0, n), ("u_lower", "u_upper", n, m)):
        lo, hi = getattr(c, lo_name), getattr(c, hi_name)
        for k in range(size):
            e = np.zeros(n + m)
            e[offset + k] = 1.0
            if hi is not None:
                A_rows.append(e)
                b_rows.append(hi[k])
            if lo is not None:
                A_rows.append(-e)
                b_rows.append(-lo[k])
    if c.halfspaces is not None:
        A_rows.extend(np.asarray(c.halfspaces.A, float))
        b_rows.extend(c.halfspaces.b)
    if not A_rows:
        raise ConfigError("constraints", "no constraint rows given")
    try:
        return Polytope(np.array(A_rows), np.array(b_rows))
    except setalg.GeometryError as exc:
        raise ConfigError("constraints", str(exc)) from None


def build_chance(cfg: ExperimentConfig, sys) -> smpc_striped.ChanceConstraintSpec:
    ch = cfg.controller.chance
    if ch is None:
        return smpc_striped.ChanceConstraintSpec.empty(sys.n, sys.m)
    return smpc_striped.ChanceConstraintSpec(ch.f, ch.g, ch.h, ch.p)


@dataclass
class Setup:
    cfg: ExperimentConfig
    sys: lti.LinearSystem
    dist: DisturbanceModel
    k_gain: np.ndarray
    p_matrix: np.ndarray
    controller: object
    design: object = None

    @property
    def phi(self):
        return self.sys.a_matrix + self.sys.b_matrix @ self.k_gain

    @property
    def s_matrix(self):
        R = np.asarray(self.cfg.weights.R, float)
        return np.asarray(self.cfg.weights.Q, float) + self.k_gain.T @ R @ self.k_gain

    def loop(self) -> engine.ClosedLoop:
        return engine.ClosedLoop(self.sys, self.controller)


def _load_design(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("controller.design_file", f"file not found: {path}") from None


def setup(cfg: ExperimentConfig) -> Setup:
    sys = build_system(cfg)
    dist = build_disturbance(cfg)
    Q, R = cfg.weights.Q, cfg.weights.R
    ctype = cfg.controller.type
    if ctype == "linear":
        if cfg.controller.K is not None:
            K = np.asarray(cfg.controller.K, float)
            S = np.asarray(Q, float) + K.T @ np.asarray(R, float) @ K
            P = lti.dlyap(sys.a_matrix + sys.b_matrix @ K, S)
        else:
            ric = lti.dare(sys, Q, R)
            K, P = ric.k_gain, ric.p_matrix
        return Setup(cfg, sys, dist, K, P, engine.LinearController(K))
    Z = build_constraints(cfg, sys)
    if ctype == "affine":
        if cfg.controller.design_file:
            prob = smpc_affine.design_from_json(_load_design(cfg.controller.design_file))
        else:
            prob = smpc_affine.build(sys, Z, cfg.controller.horizon, Q, R, dist)
        return Setup(cfg, sys, dist, prob.k_gain, prob.p_matrix, engine.AffineController(prob), prob)
    if cfg.controller.design_file:
        des = smpc_striped.design_from_json(_load_design(cfg.controller.design_file))
    else:
        des = smpc_striped.design(
            sys, Z, cfg.controller.horizon, Q, R, dist, chance=build_chance(cfg, sys), n_samples=cfg.controller.quantile_samples
        )
    return Setup(cfg, sys, dist, des.k_gain, des.p_matrix, engine.StripedController(des), des)


def initial_states(st: Setup, seed: int) -> np.ndarray:
    ini = st.cfg.initial_states
    M = st.cfg.n_trajectories
    if ini.points is not None:
        pts = np.asarray(ini.points, float)
        return pts[np.arange(M) % len(pts)]
    if ini.lower is None:
        return np.zeros((M, st.sys.n))
    return engine.sample_initial_states(st.controller, ini.lower, ini.upper, M, seed)


def omega_set(st: Setup) -> setalg.SetApproximation:
    return setalg.mrpi_outer(st.phi, st.sys.d_matrix, st.dist.support, st.cfg.certificate.mrpi_eps)


def linear_region(st: Setup) -> Polytope | None:
    """States where the controller provably applies ``u = Kx``."""
    if isinstance(st.controller, engine.AffineController):
        return st.design.terminal_set
    if isinstance(st.controller, engine.StripedController):
        return st.design.unconstrained_region()
    return None


def l_ss(st: Setup) -> float:
    return cv.lss(st.phi, st.sys.d_matrix, st.s_matrix, second_moment(st.dist))


@dataclass
class RunResult:
    setup: Setup
    x0: np.ndarray
    batch: engine.SimBatch
    omega: setalg.SetApproximation
    stats: TrajectoryStats


def run(cfg: ExperimentConfig, seed: int, jobs: int = 1, st: Setup | None = None) -> RunResult:
    st = setup(cfg) if st is None else st
    x0 = initial_states(st, seed)
    batch = engine.run_trajectories(st.loop(), st.dist, x0, cfg.k_max, seed, jobs)
    om = omega_set(st)
    stats = trajectory_stats(
        batch.states, batch.inputs, om.outer, st.s_matrix,
        np.asarray(cfg.weights.Q, float), np.asarray(cfg.weights.R, float), batch.failed,
    )
    return RunResult(st, x0, batch, om, stats)


def _iss_pairs(st: Setup, seed: int, key: int, count: int):
    ini = st.cfg.initial_states
    if ini.lower is not None:
        lo, hi = np.asarray(ini.lower, float), np.asarray(ini.upper, float)
    else:
        V = omega_set(st).outer.vertices()
        lo, hi = 2 * V.min(axis=0), 2 * V.max(axis=0)
    rng = stream(seed, key)
    X = []  # rejection keeps only states in the feasible set
    while len(X) < count:
        x = rng.uniform(lo, hi)
        if st.controller.feasible(x):
            X.append(x)
    return np.array(X), sample(st.dist, rng, count)


def iss_certificate(st: Setup, seed: int):
    """Fit a quadratic ISS certificate for the closed loop and validate it on fresh samples."""
    Q = np.asarray(st.cfg.weights.Q, float)
    a1 = float(np.min(np.linalg.eigvalsh(st.p_matrix)))
    a3 = 0.5 * float(np.min(np.linalg.eigvalsh(Q)))
    ctrl = st.controller
    if isinstance(ctrl, engine.LinearController):
        P = st.p_matrix
        V = lambda x: float(x @ P @ x)
    elif isinstance(ctrl, engine.AffineController):
        v0 = ctrl.value(np.zeros(st.sys.n))
        V = lambda x: ctrl.value(x) - v0
    else:
        V = ctrl.value
    f = st.loop().step
    n = st.cfg.certificate.iss_samples
    Xf, Wf = _iss_pairs(st, seed, STREAM_ISS_FIT, n)
    cert = cv.fit_certificate(V, f, Xf, Wf, a1, a3, lam=st.cfg.certificate.lam)
    Xv, _ = _iss_pairs(st, seed, STREAM_ISS_CHECK, n)
    report = cv.validate_iss(cert, f, lambda rng, k: Xv, st.dist, n, stream(seed, STREAM_ISS_CHECK, 1))
    return cert, report


def certify_convergence(cfg: ExperimentConfig, seed: int, jobs: int = 1, with_iss: bool = True) -> dict:
    """Monte Carlo convergence certificate for the configured closed loop."""
    st = setup(cfg)
    om = omega_set(st)
    omega = om.outer
    rpi_ok, rpi_margin = setalg.certify_rpi(omega, st.phi, st.sys.d_matrix, st.dist.support)
    if not rpi_ok:
        raise setalg.GeometryError(f"omega failed RPI certification (violation {rpi_margin:.3g})")
    region = linear_region(st)
    linear_ok = True if region is None else setalg.is_subset(omega, region)
    res = run(cfg, seed, jobs, st)
    passed, crit = convergence_verdict(res.stats)

    cert_json = None
    tail = []
    if with_iss:
        iss, report = iss_certificate(st, seed)
        r0 = float(np.max(np.linalg.norm(res.x0, axis=1)))
        r_bound = iss.alpha1.inverse(iss.alpha2(r0)) if r0 > 0 else 0.0
        reached = np.linalg.norm(res.batch.states, axis=2)
        # the certified bound or the largest simulated norm, whichever is larger
        r_bound = max(r_bound, float(np.nanmax(reached)))
        cc = cv.build_certificate(
            iss, omega, st.dist, max(r_bound, 0.0), cfg.k_max,
            p_levels=tuple(cfg.certificate.p_levels), n_samples=cfg.certificate.ball_samples,
        )
        cc.iss_report = report
        cc.verdict = "PASS" if passed else "FAIL"
        cc.empirical_curve = res.stats.outside_fraction.tolist()
        cert_json = cc.to_json()
        cert_json["alpha"] = {
            "alpha1": iss.alpha1.to_json(), "alpha2": iss.alpha2.to_json(),
            "alpha3": iss.alpha3.to_json(), "sigma": iss.sigma.to_json(), "lambda": iss.lam,
        }
        tail = cc.tail_curve
    perf = tail_average(res.stats, l_ss(st))
    return {
        "result": res,
        "passed": bool(passed),
        "criteria": crit,
        "omega": {
            "kind": "mrpi_outer",
            "eps": cfg.certificate.mrpi_eps,
            "hausdorff_gap": om.hausdorff_gap,
            "n_terms": om.n_terms,
            "n_halfspaces": omega.n_halfspaces,
            "rpi_certified": bool(rpi_ok),
            "rpi_margin": rpi_margin,
            "inside_linear_region": bool(linear_ok),
            "level_set_radius": cv.level_set_radius(omega),
        },
        "certificate": cert_json,
        "tail_curve": tail,
        "performance": perf,
    }


def average_performance(cfg: ExperimentConfig, seed: int, jobs: int = 1, s_matrix=None) -> dict:
    st = setup(cfg)
    res = run(cfg, seed, jobs, st)
    S = st.s_matrix if s_matrix is None else np.asarray(s_matrix, float)
    value = cv.lss(st.phi, st.sys.d_matrix, S, second_moment(st.dist))
    if s_matrix is not None:
        res.stats = trajectory_stats(res.batch.states, res.batch.inputs, res.omega.outer, S, failed=res.batch.failed)
    return {"result": res, "performance": tail_average(res.stats, value)}
