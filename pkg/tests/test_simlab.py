from pathlib import Path

import numpy as np
import pytest

from stochmpc import lti, setalg
from stochmpc.dist import stream, uniform_box
from stochmpc.setalg import Polytope
from stochmpc.simlab import engine
from stochmpc.simlab import experiment as ex
from stochmpc.simlab.config import ConfigError, load_config, parse_config
from stochmpc.simlab.stats import convergence_verdict, tail_average, trajectory_stats

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SCALAR = lti.LinearSystem([[0.5]], [[1.0]], [[1.0]])
W1 = uniform_box([1.0])


def scalar_run(M=500, K=200, seed=0, jobs=1):
    loop = engine.ClosedLoop.linear(SCALAR, [[0.0]])
    return engine.run_trajectories(loop, W1, np.full((M, 1), 10.0), K, seed, jobs)


@pytest.fixture(scope="module")
def scalar_batch():
    return scalar_run()


@pytest.fixture(scope="module")
def scalar_omega():
    return setalg.mrpi_outer([[0.5]], [[1.0]], W1.support, 1e-3).outer


def test_scalar_enters_mrpi_and_stays(scalar_batch, scalar_omega):
    st = trajectory_stats(scalar_batch.states, scalar_batch.inputs, scalar_omega, [[1.0]])
    passed, crit = convergence_verdict(st)
    assert passed and crit["outside_fraction_final"] == 0.0
    assert np.all(st.hitting_times >= 0) and st.exits.sum() == 0
    # |x_k| <= 2 + 8 * 0.5**k, below the outer radius once 8 * 0.5**k <= gap
    assert st.hitting_times.max() <= 14


def test_scaled_omega_fails(scalar_batch, scalar_omega):
    st = trajectory_stats(scalar_batch.states, scalar_batch.inputs, scalar_omega.scale(0.5), [[1.0]])
    passed, crit = convergence_verdict(st)
    assert not passed
    assert crit["outside_fraction_final"] > 0.01 or crit["post_entry_exits"] > 0


def test_jobs_and_batch_independence(scalar_batch):
    par = scalar_run(jobs=4)
    assert np.array_equal(par.states, scalar_batch.states)
    loop = engine.ClosedLoop.linear(SCALAR, [[0.0]])
    W = engine.disturbance_paths(W1, 0, [17], 200)
    alone = loop.run(np.array([[10.0]]), W)
    assert np.array_equal(alone.states[0], scalar_batch.states[17])


def test_black_box_loop_matches_linear(scalar_batch):
    bb = engine.ClosedLoop.black_box(lambda x, w: 0.5 * x + w, 1)
    W = engine.disturbance_paths(W1, 0, range(5), 200)
    out = bb.run(np.full((5, 1), 10.0), W)
    assert np.allclose(out.states, scalar_batch.states[:5], atol=1e-12)
    assert out.inputs is None


def test_simulate_single_trajectory():
    loop = engine.ClosedLoop.linear(SCALAR, [[0.0]])
    b = engine.simulate(loop, W1, [1.0], 10, stream(0, 0))
    assert b.states.shape == (1, 11, 1)
    with pytest.raises(ValueError):
        engine.simulate(loop, W1, [1.0], 0, stream(0, 0))


def test_failed_trajectories_recorded(di_affine, di_dist):
    ctrl = engine.AffineController(di_affine)
    loop = engine.ClosedLoop(di_affine.sys, ctrl)
    out = engine.run_trajectories(loop, di_dist, np.array([[0.0, 0.0], [4.9, 1.9]]), 5, 0)
    assert out.failed.tolist() == [False, True]
    assert np.all(np.isnan(out.states[1, 1:]))
    st = trajectory_stats(out.states, out.inputs, Polytope.box([1.0, 1.0]), np.eye(2), failed=out.failed)
    assert st.exits[1] == 0
    assert not convergence_verdict(st)[0]


def test_controllers_pickle_roundtrip(di_striped):
    import pickle

    ctrl = engine.StripedController(di_striped)
    other = pickle.loads(pickle.dumps(ctrl))
    x = np.array([-4.0, 1.6])
    assert np.allclose(other.solve(x)[0], ctrl.solve(x)[0])
    assert other.design._solver is not ctrl.design._solver


def test_sample_initial_states_rejects_infeasible(di_affine):
    ctrl = engine.AffineController(di_affine)
    X = engine.sample_initial_states(ctrl, [-5, -2], [5, 2], 20, 3)
    assert all(ctrl.feasible(x) for x in X)
    assert np.array_equal(X[5], engine.sample_initial_states(ctrl, [-5, -2], [5, 2], 6, 3)[5])


def test_linear_loop_performance():
    loop = engine.ClosedLoop.linear(SCALAR, [[0.0]])
    out = engine.run_trajectories(loop, W1, np.zeros((200, 1)), 400, 1)
    st = trajectory_stats(out.states, out.inputs, Polytope.box([2.5]), [[1.0]])
    rep = tail_average(st, (1 / 3) / 0.75)
    assert rep.passed and abs(rep.relative_gap) <= 0.05
    assert not tail_average(st, 0.5 * (1 / 3) / 0.75).passed


def test_running_average_and_histogram(scalar_batch, scalar_omega):
    st = trajectory_stats(scalar_batch.states, scalar_batch.inputs, scalar_omega, [[1.0]])
    ra = st.running_average()
    assert ra[0] == pytest.approx(100.0)
    assert sum(st.hitting_histogram.values()) == 500
    js = st.to_json()
    assert js["entered_fraction"] == 1.0 and js["post_entry_exits"] == 0


BASE = {
    "system": {"A": [[0.5]], "B": [[1.0]]},
    "weights": {"Q": [[1.0]], "R": [[1.0]]},
    "disturbance": {"halfwidth": [1.0]},
    "controller": {"type": "linear"},
}


def _cfg(**over):
    import copy

    c = copy.deepcopy(BASE)
    for k, v in over.items():
        c[k] = v
    return c


def test_config_defaults():
    cfg = parse_config(_cfg())
    assert cfg.k_max == 500 and cfg.certificate.mrpi_eps == 1e-3 and cfg.controller.horizon == 3


@pytest.mark.parametrize(
    "over, path",
    [
        ({"system": {"A": [[0.5, 0.0]], "B": [[1.0]]}}, "system.A"),
        ({"system": {"A": [[0.5]], "B": [[1.0], [2.0]]}}, "system.B"),
        ({"weights": {"Q": [[1.0]], "R": [[1.0, 0.0]]}}, "weights.R"),
        ({"disturbance": {"halfwidth": [-1.0]}}, "disturbance.halfwidth"),
        ({"disturbance": {"halfwidth": [1.0, 1.0]}}, "disturbance.halfwidth"),
        ({"disturbance": {"halfwidth": [1.0], "kind": "truncated_gaussian"}}, "disturbance.cov"),
        ({"controller": {"type": "affine"}}, "constraints"),
        ({"controller": {"type": "mystery"}}, "controller.type"),
        ({"controller": {"type": "linear", "quantile_samples": 10}}, "controller.quantile_samples"),
        ({"k_max": 0}, "k_max"),
        ({"unknown_key": 1}, "unknown_key"),
        ({"initial_states": {"points": [[1.0, 2.0]]}}, "initial_states.points[0]"),
        ({"initial_states": {"lower": [1.0]}}, "initial_states"),
        ({"certificate": {"iss_samples": 10}}, "certificate.iss_samples"),
    ],
)
def test_config_errors_report_path(over, path):
    with pytest.raises(ConfigError) as info:
        parse_config(_cfg(**over))
    assert info.value.path == path


def test_small_disturbance_scalar_outside_fraction_zero():
    w = uniform_box([0.1])
    loop = engine.ClosedLoop.linear(SCALAR, [[0.0]])
    x0 = np.linspace(-3, 3, 500)[:, None]
    out = engine.run_trajectories(loop, w, x0, 200, 4)
    omega = setalg.mrpi_outer([[0.5]], [[1.0]], w.support, 1e-3).outer
    st = trajectory_stats(out.states, out.inputs, omega, [[1.0]])
    assert st.outside_fraction[200] == 0.0 and st.exits.sum() == 0


def test_zero_disturbance_enters_origin_set():
    w = uniform_box([0.0])
    loop = engine.ClosedLoop.linear(SCALAR, [[0.0]])
    out = engine.run_trajectories(loop, w, np.full((20, 1), 5.0), 60, 0)
    omega = setalg.mrpi_outer([[0.5]], [[1.0]], w.support, 1e-3).outer
    st = trajectory_stats(out.states, out.inputs, omega, [[1.0]])
    assert convergence_verdict(st)[0] and np.all(st.hitting_times >= 0)
    assert np.all(np.diff(np.abs(out.states[:, :, 0]), axis=1) <= 0)  # monotone contraction
    rep = tail_average(st, 0.0)
    assert rep.passed and rep.tail_average < 1e-15
    still = engine.run_trajectories(loop, w, np.zeros((3, 1)), 10, 0)
    assert np.all(still.states == 0)


def test_variance_recursion():
    w = uniform_box([1.0])
    loop = engine.ClosedLoop.linear(SCALAR, [[0.0]])
    out = engine.run_trajectories(loop, w, np.full((4000, 1), 2.0), 12, 6)
    var = 0.0
    for k in range(1, 13):
        var = 0.25 * var + 1.0 / 3.0
        x = out.states[:, k, 0]
        mean = 2.0 * 0.5**k
        se = np.sqrt(2.0 / (len(x) - 1)) * var  # std error of a sample variance (near-normal data)
        assert abs(x.mean() - mean) <= 5 * np.sqrt(var / len(x))
        assert abs(x.var(ddof=1) - var) <= 6 * se


def test_outside_fraction_nonincreasing_for_rpi_set(di_affine, di_dist):
    from stochmpc.simlab.engine import AffineController

    ctrl = AffineController(di_affine)
    X0 = engine.sample_initial_states(ctrl, [-4.5, -1.8], [4.5, 1.8], 100, 11)
    out = engine.run_trajectories(engine.ClosedLoop(di_affine.sys, ctrl), di_dist, X0, 80, 11)
    omega = setalg.mrpi_outer(di_affine.phi, np.eye(2), di_dist.support, 1e-3).outer
    st = trajectory_stats(out.states, out.inputs, omega, np.eye(2), np.eye(2), np.eye(1), out.failed)
    assert np.all(np.diff(st.outside_fraction) <= 0)
    assert st.full_cost.shape == (100, 80)


@pytest.mark.slow
@pytest.mark.parametrize("name", ["double_integrator.json", "double_integrator_striped.json"])
def test_iss_certificate_on_ten_thousand_pairs(name):
    cfg = load_config(CONFIGS / name)
    cfg.certificate.iss_samples = 10_000
    cert, report = ex.iss_certificate(ex.setup(cfg), 0)
    assert report.passed and report.n_violations == 0
