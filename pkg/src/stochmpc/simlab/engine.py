"""Closed-loop Monte Carlo engine.

Trajectories advance in lockstep batches.  States where a controller's
unconstrained solution is known to be optimal are handled in one
vectorised step; the rest get an individual QP solve warm-started from the
same trajectory's previous solution.  All per-row arithmetic is done
column by column so a trajectory's numbers never depend on which batch or
worker it ran in.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .. import lti, smpc_affine, smpc_striped
from ..dist import DisturbanceModel, sample, stream

STREAM_X0 = 1
STREAM_W = 2


class LinearController:
    """``u = K x`` everywhere."""

    kind = "linear"

    def __init__(self, k_gain):
        self.k_gain = np.atleast_2d(np.asarray(k_gain, float))

    def fast_mask(self, X):
        return np.ones(len(X), dtype=bool)

    def fast_inputs(self, X):
        return lti.batch_matvec(X, self.k_gain)

    def solve(self, x, warm=None):
        return self.k_gain @ x, None

    def feasible(self, x) -> bool:
        return True


class AffineController:
    kind = "affine"

    def __init__(self, prob: smpc_affine.AffinePolicyProblem):
        self.prob = prob
        self.k_gain = prob.k_gain

    def fast_mask(self, X):
        return self.prob.fast_mask(X)

    def fast_inputs(self, X):
        return self.prob.fast_inputs(X)

    def solve(self, x, warm=None):
        z, sol = self.prob.solve_z(x, warm)
        return z[: self.prob.sys.m].copy(), sol

    def feasible(self, x) -> bool:
        return smpc_affine.feasible_set_probe(self.prob, x)

    def value(self, x) -> float:
        z, _ = self.prob.solve_z(x)
        return self.prob.expected_cost(x, z)

    def __getstate__(self):
        return {"prob": self.prob}

    def __setstate__(self, state):
        self.__init__(state["prob"].clone())


class StripedController:
    kind = "striped"

    def __init__(self, design: smpc_striped.StripedDesign):
        self.design = design
        self.k_gain = design.k_gain

    def fast_mask(self, X):
        return self.design.fast_mask(X)

    def fast_inputs(self, X):
        return self.design.fast_inputs(X)

    def solve(self, x, warm=None):
        c, sol = self.design.solve_c(x, warm)
        return self.k_gain @ x + c[: self.design.sys.m], sol

    def feasible(self, x) -> bool:
        try:
            self.design.solve_c(x)
        except smpc_striped.InfeasibleStateError:
            return False
        return True

    def value(self, x) -> float:
        c, _ = self.design.solve_c(x)
        return self.design.value(x, c)

    def __getstate__(self):
        return {"design": self.design}

    def __setstate__(self, state):
        self.__init__(state["design"].clone())


INFEASIBLE_ERRORS = (smpc_affine.InfeasibleStateError, smpc_striped.InfeasibleStateError)


@dataclass
class SimBatch:
    """Trajectories ``states[t, k]``; rows after a failure are NaN."""

    states: np.ndarray
    inputs: np.ndarray | None
    failed: np.ndarray
    fail_step: np.ndarray
    qp_solves: int = 0


class ClosedLoop:
    """``x+ = f(x, w)`` from a linear system and controller, or a black-box map.

    A black-box ``step_map(x, w)`` must be deterministic; it is called
    one state at a time.
    """

    def __init__(self, sys: lti.LinearSystem | None = None, controller=None, step_map=None, n: int | None = None):
        if step_map is None and (sys is None or controller is None):
            raise ValueError("need either (sys, controller) or step_map")
        self.sys = sys
        self.controller = controller
        self.step_map = step_map
        self.n = sys.n if sys is not None else int(n)

    @classmethod
    def linear(cls, sys, k_gain):
        return cls(sys, LinearController(k_gain))

    @classmethod
    def black_box(cls, step_map, n):
        return cls(step_map=step_map, n=n)

    @property
    def has_inputs(self) -> bool:
        return self.step_map is None

    def step(self, x, w):
        x = np.asarray(x, float).reshape(-1)
        w = np.asarray(w, float).reshape(-1)
        if self.step_map is not None:
            return np.asarray(self.step_map(x, w), float).reshape(-1)
        u, _ = self.controller.solve(x)
        return self.sys.step(x, u, w)

    def run(self, X0, W) -> SimBatch:
        """Advance ``X0`` (M x n) through disturbances ``W`` (M x K x q)."""
        X0 = np.atleast_2d(np.asarray(X0, float))
        M, K = W.shape[0], W.shape[1]
        states = np.full((M, K + 1, self.n), np.nan)
        states[:, 0] = X0
        failed = np.zeros(M, dtype=bool)
        fail_step = np.full(M, -1)
        if self.step_map is not None:
            for i in range(M):
                x = X0[i]
                for k in range(K):
                    x = np.asarray(self.step_map(x, W[i, k]), float).reshape(-1)
                    states[i, k + 1] = x
            return SimBatch(states, None, failed, fail_step)

        sys, ctrl = self.sys, self.controller
        inputs = np.full((M, K, sys.m), np.nan)
        warm = [None] * M
        X = X0.copy()
        alive = np.arange(M)
        solves = 0
        for k in range(K):
            if alive.size == 0:
                break
            Xa = X[alive]
            U = np.zeros((alive.size, sys.m))
            fast = ctrl.fast_mask(Xa)
            if np.any(fast):
                U[fast] = ctrl.fast_inputs(Xa[fast])
            dead = []
            for r in np.flatnonzero(~fast):
                i = alive[r]
                try:
                    U[r], warm[i] = ctrl.solve(Xa[r], warm[i])
                    solves += 1
                except INFEASIBLE_ERRORS:
                    failed[i] = True
                    fail_step[i] = k
                    dead.append(r)
            Xn = (
                lti.batch_matvec(Xa, sys.a_matrix)
                + lti.batch_matvec(U, sys.b_matrix)
                + lti.batch_matvec(W[alive, k], sys.d_matrix)
            )
            inputs[alive, k] = U
            states[alive, k + 1] = Xn
            X[alive] = Xn
            if dead:
                dead = np.array(dead)
                inputs[alive[dead], k] = np.nan
                states[alive[dead], k + 1:] = np.nan
                alive = np.delete(alive, dead)
        return SimBatch(states, inputs, failed, fail_step, solves)


def disturbance_paths(model: DisturbanceModel, seed: int, ids, k_max: int) -> np.ndarray:
    """Disturbance sequence of every trajectory, each from its own substream."""
    return np.stack([sample(model, stream(seed, STREAM_W, int(i)), k_max) for i in ids]) if len(ids) else np.zeros((0, k_max, model.dim))


def simulate(loop: ClosedLoop, dist_model: DisturbanceModel, x0, k_max: int, rng) -> SimBatch:
    """One trajectory ``x_0..x_{k_max}`` driven by draws from ``rng``."""
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    W = sample(dist_model, rng, k_max)[None]
    return loop.run(np.asarray(x0, float)[None], W)


def _run_chunk(args):
    loop, model, X0, ids, k_max, seed = args
    return loop.run(X0, disturbance_paths(model, seed, ids, k_max))


def run_trajectories(loop: ClosedLoop, dist_model: DisturbanceModel, X0, k_max: int, seed: int, jobs: int = 1) -> SimBatch:
    """Run ``len(X0)`` trajectories; trajectory ``i`` uses substream ``(seed, i)``.

    ``jobs > 1`` splits the trajectories over worker processes; results
    are identical to a serial run.
    """
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    X0 = np.atleast_2d(np.asarray(X0, float))
    M = len(X0)
    ids = np.arange(M)
    jobs = max(1, min(int(jobs), M))
    chunks = [c for c in np.array_split(ids, jobs) if c.size]
    tasks = [(loop, dist_model, X0[c], c, k_max, seed) for c in chunks]
    if jobs == 1:
        parts = [_run_chunk(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(_run_chunk, tasks))
    states = np.concatenate([p.states for p in parts])
    inputs = None if parts[0].inputs is None else np.concatenate([p.inputs for p in parts])
    return SimBatch(
        states,
        inputs,
        np.concatenate([p.failed for p in parts]),
        np.concatenate([p.fail_step for p in parts]),
        int(sum(p.qp_solves for p in parts)),
    )


def sample_initial_states(controller, lower, upper, count: int, seed: int, max_tries: int = 10_000) -> np.ndarray:
    """Uniform draws from a box, rejecting states the controller cannot handle.

    Each trajectory's draw comes from its own substream.
    """
    lower = np.asarray(lower, float)
    upper = np.asarray(upper, float)
    out = np.zeros((count, lower.size))
    for i in range(count):
        rng = stream(seed, STREAM_X0, i)
        for _ in range(max_tries):
            x = rng.uniform(lower, upper)
            if controller is None or controller.feasible(x):
                out[i] = x
                break
        else:
            raise RuntimeError(f"no feasible initial state found for trajectory {i}")
    return out
