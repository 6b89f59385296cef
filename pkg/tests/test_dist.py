import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import truncnorm

from stochmpc import dist
from stochmpc.dist import DisturbanceConfigError, DisturbanceModel


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.0, 5.0), min_size=1, max_size=4), st.integers(0, 2**31))
def test_uniform_samples_in_support(hw, seed):
    m = dist.uniform_box(hw)
    W = dist.sample(m, dist.stream(seed, 1), 500)
    assert W.shape == (500, len(hw))
    assert np.all(np.abs(W) <= np.asarray(hw) + 1e-15)


def test_truncated_gaussian_in_support_and_moment():
    m = dist.truncated_gaussian([1.0], [[1.0]], seed=4)
    W = dist.sample(m, dist.stream(4, 0), 20_000)
    assert np.all(np.abs(W) <= 1.0)
    var = truncnorm(-1, 1).var()
    est = dist.second_moment(m)[0, 0]
    se = dist.second_moment_stderr(m)[0, 0]
    assert abs(est - var) <= 5 * se


def test_uniform_second_moment_exact():
    m = dist.uniform_box([0.1, 0.3])
    assert np.allclose(dist.second_moment(m), np.diag([0.01 / 3, 0.09 / 3]))
    W = dist.sample(m, dist.stream(0, 9), 400_000)
    assert np.allclose(W.T @ W / len(W), dist.second_moment(m), atol=2e-4)


def test_streams_independent_of_order():
    a = dist.sample(dist.uniform_box([1.0]), dist.stream(3, 2, 7), 5)
    _ = dist.sample(dist.uniform_box([1.0]), dist.stream(3, 2, 6), 5)
    b = dist.sample(dist.uniform_box([1.0]), dist.stream(3, 2, 7), 5)
    c = dist.sample(dist.uniform_box([1.0]), dist.stream(3, 2, 8), 5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_config_errors():
    with pytest.raises(DisturbanceConfigError):
        dist.uniform_box([-1.0])
    with pytest.raises(DisturbanceConfigError):
        DisturbanceModel("laplace", [1.0])
    with pytest.raises(DisturbanceConfigError):
        dist.truncated_gaussian([1.0], [[-1.0]])
    tight = dist.truncated_gaussian([1e-4, 1e-4], np.eye(2))
    with pytest.raises(DisturbanceConfigError):
        dist.sample(tight, dist.stream(0), 100)


def test_json_roundtrip():
    m = dist.truncated_gaussian([1.0, 2.0], [[1.0, 0.2], [0.2, 1.0]], seed=5)
    r = DisturbanceModel.from_json(m.to_json())
    assert r.kind == m.kind and np.array_equal(r.halfwidth, m.halfwidth) and np.array_equal(r.cov, m.cov)


def test_ball_probability_square():
    # P{||w|| <= 1} for w uniform on [-1, 1]^2 is pi / 4
    bp = dist.ball_probability(dist.uniform_box([1.0, 1.0]), 1.0, n_samples=200_000)
    assert abs(bp.estimate - np.pi / 4) <= 4 * bp.std_error + 1e-12
    assert bp.lower_bound == pytest.approx(np.pi / 4)
    assert bp.certified_lower() <= bp.estimate + 4 * bp.std_error


def test_ball_probability_covering_radius():
    bp = dist.ball_probability(dist.uniform_box([0.1, 0.1]), 0.2)
    assert bp.estimate == 1.0 and bp.certified_lower() == 1.0


@pytest.mark.parametrize("model", [dist.uniform_box([1.0, 0.5]), dist.truncated_gaussian([1.0, 2.0], [[1.0, 0.3], [0.3, 2.0]])])
def test_zero_mean_and_odd_moments(model):
    W = dist.sample(model, dist.stream(31, 0), 200_000)
    se = W.std(axis=0, ddof=1) / np.sqrt(len(W))
    assert np.all(np.abs(W.mean(axis=0)) <= 4 * se)
    cube = W**3
    assert np.all(np.abs(cube.mean(axis=0)) <= 4 * cube.std(axis=0, ddof=1) / np.sqrt(len(W)))


def test_ball_probability_monotone_in_lambda():
    m = dist.uniform_box([1.0, 1.0])
    est = [dist.ball_probability(m, lam, rng=dist.stream(0, 9)).estimate for lam in (0.1, 0.3, 0.6, 1.0, 1.5)]
    assert all(b >= a for a, b in zip(est, est[1:]))


def test_ball_probability_tiny_lambda_analytic():
    m = dist.uniform_box([1.0, 1.0])
    bp = dist.ball_probability(m, 1e-3, n_samples=1000)
    assert bp.lower_bound == pytest.approx(np.pi * 1e-6 / 4, rel=1e-12)
    assert bp.certified_lower() > 0
