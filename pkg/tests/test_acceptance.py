"""Acceptance suite: one test per criterion, each recording a pass/fail line."""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from stochmpc import convergence as cv
from stochmpc import lti, qpcore, setalg, smpc_affine, smpc_striped
from stochmpc.dist import stream, uniform_box
from stochmpc.qpcore import QuadraticProgram
from stochmpc.setalg import Polytope
from stochmpc.simlab import experiment
from stochmpc.simlab.cli import main
from stochmpc.simlab.config import load_config

from _designs import loose_design, tight_design
from test_qpcore import active_set_oracle
from test_smpc_affine import boundary_grid

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SEEDS = (0, 1, 2)


def config(name, controller=None, **over):
    cfg = load_config(CONFIGS / name)
    if controller is not None:
        cfg.controller.type = controller
    for k, v in over.items():
        setattr(cfg, k, v)
    return cfg


def test_c01_mrpi(criterion):
    t0 = time.perf_counter()
    w1 = Polytope.box([1.0])
    s = setalg.mrpi_outer([[0.5]], [[1.0]], w1, 1e-3)
    gap_s = setalg.hausdorff_distance(s.outer, Polytope.box([2.0]))
    rpi_s = setalg.certify_rpi(s.outer, [[0.5]], [[1.0]], w1, tol=1e-8)[0]
    phi = np.diag([0.5, 0.8])
    w2 = Polytope.box([1.0, 1.0])
    d = setalg.mrpi_outer(phi, np.eye(2), w2, 1e-3)
    gap_d = setalg.hausdorff_distance(d.outer, Polytope.box([2.0, 5.0]))
    rpi_d = setalg.certify_rpi(d.outer, phi, np.eye(2), w2, tol=1e-8)[0]
    dt = time.perf_counter() - t0
    ok = gap_s <= 1e-3 and gap_d <= 1e-3 and rpi_s and rpi_d and dt < 5
    criterion(1, ok, f"scalar gap {gap_s:.2e}, diagonal gap {gap_d:.2e}, RPI {rpi_s and rpi_d}, {dt:.2f}s")
    assert ok


def test_c02_riccati_lyapunov(criterion):
    sol = lti.dare(lti.LinearSystem([[1.0]], [[1.0]], [[1.0]]), [[1.0]], [[1.0]])
    err_golden = abs(sol.p_matrix[0, 0] - (1 + np.sqrt(5)) / 2)
    rng = np.random.default_rng(100)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 6))
        A = rng.standard_normal((n, n))
        phi = A / lti.spectral_radius(A) * rng.uniform(0.1, 0.95)
        G = rng.standard_normal((n, n))
        S = G @ G.T + np.eye(n)
        P = lti.dlyap(phi, S)
        worst = max(worst, float(np.max(np.abs(P - phi.T @ P @ phi - S))))
    sys = lti.LinearSystem([[1.0, 1.0], [0.0, 1.0]], [[0.5], [1.0]], np.eye(2))
    ric = lti.dare(sys, np.eye(2), np.eye(1))
    K = ric.k_gain
    P2 = lti.dlyap(sys.a_matrix + sys.b_matrix @ K, np.eye(2) + K.T @ K)
    err_lqr = float(np.max(np.abs(P2 - ric.p_matrix)))
    ok = err_golden <= 1e-9 and worst < 1e-10 and err_lqr <= 1e-8
    criterion(2, ok, f"golden ratio err {err_golden:.1e}, max dlyap residual {worst:.1e}, LQR identity err {err_lqr:.1e}")
    assert ok


def test_c03_qp_solver(criterion):
    rng = np.random.default_rng(2024_03)
    worst, kkt_fail = 0.0, 0
    for _ in range(200):
        n = int(rng.integers(1, 4))
        Lm = rng.standard_normal((n, n))
        H = Lm @ Lm.T + 0.5 * np.eye(n)
        f = 3 * rng.standard_normal(n)
        nb = int(rng.integers(0, 7))
        G = np.zeros((nb, n))
        G[np.arange(nb), rng.integers(0, n, nb)] = rng.choice([-1.0, 1.0], nb)
        h = rng.uniform(0.1, 2.0, nb)
        qp = QuadraticProgram(H, f, G, h)
        sol = qpcore.solve(qp, tol=1e-9)
        z_ref, _ = active_set_oracle(H, f, G, h)
        worst = max(worst, float(np.max(np.abs(sol.z_star - z_ref))))
        kkt_fail += not (sol.optimal and qpcore.kkt_ok(qp, sol, 1e-6))
    ok = worst <= 1e-6 and kkt_fail == 0
    criterion(3, ok, f"200 QPs: max deviation from active-set oracle {worst:.1e}, KKT failures {kkt_fail}")
    assert ok


def test_c04_terminal_linearity(criterion, di_affine):
    grid = boundary_grid(di_affine.terminal_set)
    K = di_affine.k_gain
    worst = 0.0
    for x in grid:
        u, _ = smpc_affine.control(di_affine, x)
        sol = qpcore.solve(di_affine.qp_instance(x), tol=1e-10)
        worst = max(worst, float(np.linalg.norm(u - K @ x)), float(np.linalg.norm(sol.z_star[:1] - K @ x)))
    ok = len(grid) == 100 and worst <= 1e-6
    criterion(4, ok, f"{len(grid)} points of X_f, max |u - Kx| {worst:.1e}")
    assert ok


@pytest.mark.slow
def test_c05_convergence(criterion):
    lines, ok = [], True
    for ctrl in ("affine", "striped"):
        cfg = config("double_integrator_striped.json" if ctrl == "striped" else "double_integrator.json")
        assert cfg.n_trajectories == 500 and cfg.k_max == 500
        t0 = time.perf_counter()
        entered = exits = failed = 0
        rpi = True
        for seed in SEEDS:
            r = experiment.certify_convergence(cfg, seed, with_iss=False)
            st = r["result"].stats
            entered += int(np.sum(st.hitting_times >= 0))
            exits += int(st.exits.sum())
            failed += int(st.failed.sum())
            rpi &= r["omega"]["rpi_certified"]
        dt = time.perf_counter() - t0
        good = entered == 500 * len(SEEDS) and exits == 0 and failed == 0 and rpi and dt < 300
        ok &= good
        lines.append(f"{ctrl}: entered {entered}/{500 * len(SEEDS)}, exits {exits}, failures {failed}, {dt:.0f}s")
    criterion(5, ok, "; ".join(lines))
    assert ok


@pytest.mark.slow
def test_c06_performance(criterion):
    lines, ok = [], True
    for ctrl, name in (("affine", "double_integrator.json"), ("striped", "double_integrator_striped.json")):
        perf = experiment.average_performance(config(name), 0)["performance"]
        good = abs(perf.relative_gap) <= 0.05
        ok &= good
        lines.append(f"{ctrl} gap {perf.relative_gap:+.2%}")
    cfg = config("double_integrator.json", "linear", n_trajectories=200, k_max=2000)
    perf = experiment.average_performance(cfg, 0)["performance"]
    ok &= abs(perf.relative_gap) <= 0.02
    lines.append(f"linear (M=200, K=2000) gap {perf.relative_gap:+.2%}")
    criterion(6, ok, "; ".join(lines))
    assert ok


def test_c07_horizons(criterion):
    bad = []
    for p in (0.2, 0.05, 0.01):
        for p_eps in (0.3, 0.5, 0.9):
            for n_f in (2, 5, 10):
                n_p = cv.horizon_np(p, p_eps, n_f)
                if cv.tail_bound(n_p, p_eps, n_f) > p:
                    bad.append((p, p_eps, n_f))
    exact = all(cv.horizon_np(p, 1.0, n_f) == n_f for p in (0.2, 0.05, 0.01) for n_f in (2, 5, 10))
    ok = not bad and exact
    criterion(7, ok, f"27 cells, violations {len(bad)}, N_p = N_f at p_eps = 1: {exact}")
    assert ok


def test_c08_iss_harness(criterion):
    def cert(sigma):
        return cv.IssCertificate(
            lyapunov=lambda x: float(x @ x),
            alpha1=cv.KFunction.power_law(1.0, 2),
            alpha2=cv.KFunction.power_law(1.0, 2),
            alpha3=cv.KFunction.power_law(0.5, 2),
            sigma=cv.KFunction.power_law(sigma, 2),
        )

    loop = lambda x, w: 0.5 * x + w
    sampler = lambda rng, n: rng.uniform(-10, 10, size=(n, 1))
    good = cv.validate_iss(cert(3.0), loop, sampler, uniform_box([1.0]), 10_000, stream(8, 0))
    broken = cv.validate_iss(cert(0.01), loop, sampler, uniform_box([1.0]), 10_000, stream(8, 0))
    ok = good.passed and good.n_violations == 0 and not broken.passed and len(broken.witnesses) > 0
    criterion(8, ok, f"valid: {good.n_violations} violations; broken: {broken.n_violations} violations, witness {bool(broken.witnesses)}")
    assert ok


def test_c09_linear_on_mrpi(criterion, di_sys, di_z, di_dist):
    loose = loose_design(di_sys, di_z, di_dist)
    m_loose = setalg.mrpi_outer(loose.phi, np.eye(2), di_dist.support, 1e-3)
    rep_loose = smpc_striped.check_assumption5(loose, m_loose)
    tight, m_tight, b, t_row, h = tight_design(di_sys, di_z, di_dist)
    rep_tight = smpc_striped.check_assumption5(tight, m_tight)
    ok = rep_loose.passed and not rep_tight.passed and rep_tight.witness is not None
    criterion(
        9, ok,
        f"loose: pass {rep_loose.passed}; tight (t_inf {t_row:.4f} < b {b:.4f} < h_mRPI {h:.4f}): "
        f"pass {rep_tight.passed}, max |c0| {rep_tight.max_c0_norm:.3g}, witness {rep_tight.witness}",
    )
    assert ok


def _strip(path):
    return "\n".join(l for l in (Path(path) / "summary.json").read_text().splitlines() if '"generated_at"' not in l)


@pytest.mark.slow
def test_c10_reproducibility(criterion, tmp_path):
    di, dis = str(CONFIGS / "double_integrator.json"), str(CONFIGS / "double_integrator_striped.json")
    runs = [
        ("riccati", di), ("mrpi", di), ("design-affine", di), ("design-striped", dis),
        ("simulate", di), ("perf", dis), ("certify", dis),
    ]
    mismatch = []
    for k, (cmd, cfg) in enumerate(runs):
        a, b = tmp_path / f"{k}a", tmp_path / f"{k}b"
        main([cmd, "--config", cfg, "--out", str(a), "--seed", "5"])
        main([cmd, "--config", cfg, "--out", str(b), "--seed", "5"])
        if _strip(a) != _strip(b):
            mismatch.append(cmd)
    j1, j8 = tmp_path / "j1", tmp_path / "j8"
    main(["certify", "--config", di, "--out", str(j1), "--seed", "5", "--jobs", "1"])
    main(["certify", "--config", di, "--out", str(j8), "--seed", "5", "--jobs", "8"])
    jobs_same = _strip(j1) == _strip(j8) and (j1 / "trajectories.csv").read_bytes() == (j8 / "trajectories.csv").read_bytes()
    ok = not mismatch and jobs_same
    criterion(10, ok, f"{len(runs)} subcommands repeated, mismatches {mismatch or 'none'}; jobs 1 vs 8 identical: {jobs_same}")
    assert ok
