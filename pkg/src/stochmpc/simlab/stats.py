"""Trajectory statistics, convergence verdicts and performance reports."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import lti
from ..setalg import Polytope

MEMBER_TOL = 1e-9
PERF_TOL = 0.05


def _quad(X, S):
    """``x'Sx`` for every row of ``X`` (row-independent arithmetic)."""
    return np.sum(lti.batch_matvec(X, S) * X, axis=1)


@dataclass
class TrajectoryStats:
    outside_fraction: np.ndarray  # k = 0..K
    hitting_times: np.ndarray  # -1 if never entered
    hitting_histogram: dict
    exits: np.ndarray  # post-entry exit events per trajectory
    stage_cost: np.ndarray  # M x (K+1), x'Sx
    full_cost: np.ndarray | None  # M x K, x'Qx + u'Ru
    in_omega: np.ndarray  # M x (K+1)
    final_window_member: np.ndarray
    failed: np.ndarray

    @property
    def n_trajectories(self) -> int:
        return len(self.hitting_times)

    @property
    def k_max(self) -> int:
        return len(self.outside_fraction) - 1

    def mean_stage_cost(self) -> np.ndarray:
        return np.nanmean(self.stage_cost, axis=0)

    def running_average(self) -> np.ndarray:
        """``1/k sum_{j<k} E[x_j'S x_j]`` for ``k = 1..K``."""
        c = np.cumsum(self.mean_stage_cost()[:-1])
        return c / np.arange(1, len(c) + 1)

    def to_json(self) -> dict:
        hit = self.hitting_times[self.hitting_times >= 0]
        return {
            "n_trajectories": self.n_trajectories,
            "k_max": self.k_max,
            "entered_fraction": float(np.mean(self.hitting_times >= 0)),
            "outside_fraction_final": float(self.outside_fraction[-1]),
            "post_entry_exits": int(self.exits.sum()),
            "trajectories_with_exits": int(np.count_nonzero(self.exits)),
            "failed_trajectories": int(self.failed.sum()),
            "hitting_time_mean": float(hit.mean()) if hit.size else None,
            "hitting_time_max": int(hit.max()) if hit.size else None,
            "hitting_histogram": self.hitting_histogram,
            "final_window_member_fraction": float(np.mean(self.final_window_member)),
        }


def trajectory_stats(states, inputs, omega: Polytope, s_matrix, q_matrix=None, r_matrix=None, failed=None) -> TrajectoryStats:
    """Statistics of ``states`` (M x (K+1) x n) relative to ``omega``."""
    M, K1, n = states.shape
    flat = states.reshape(-1, n)
    ok = np.all(np.isfinite(flat), axis=1)
    inside = np.zeros(len(flat), dtype=bool)
    inside[ok] = np.all(lti.batch_matvec(flat[ok], omega.A) <= np.asarray(omega.b) + MEMBER_TOL, axis=1)
    inside = inside.reshape(M, K1)
    entered = inside.any(axis=1)
    first = np.where(entered, np.argmax(inside, axis=1), -1)
    exits = np.zeros(M, dtype=int)
    finite = ok.reshape(M, K1)
    for i in np.flatnonzero(entered):
        after = inside[i, first[i]:][finite[i, first[i]:]]
        exits[i] = int(np.count_nonzero(after[:-1] & ~after[1:]))
    hist = {}
    for t in first:
        key = "never" if t < 0 else str(int(t))
        hist[key] = hist.get(key, 0) + 1
    hist = dict(sorted(hist.items(), key=lambda kv: (kv[0] == "never", int(kv[0]) if kv[0] != "never" else 0)))
    stage = np.full(M * K1, np.nan)
    stage[ok] = _quad(flat[ok], np.atleast_2d(s_matrix))
    stage = stage.reshape(M, K1)
    full = None
    if inputs is not None and q_matrix is not None and r_matrix is not None:
        K = K1 - 1
        xs = states[:, :K].reshape(-1, n)
        us = inputs.reshape(-1, inputs.shape[-1])
        good = np.all(np.isfinite(xs), axis=1) & np.all(np.isfinite(us), axis=1)
        full = np.full(M * K, np.nan)
        full[good] = _quad(xs[good], q_matrix) + _quad(us[good], r_matrix)
        full = full.reshape(M, K)
    half = (K1 - 1) // 2
    return TrajectoryStats(
        outside_fraction=1.0 - inside.mean(axis=0),
        hitting_times=first,
        hitting_histogram=hist,
        exits=exits,
        stage_cost=stage,
        full_cost=full,
        in_omega=inside,
        final_window_member=inside[:, half:].all(axis=1),
        failed=np.zeros(M, dtype=bool) if failed is None else np.asarray(failed, bool),
    )


def convergence_verdict(stats: TrajectoryStats) -> tuple[bool, dict]:
    """PASS iff the final outside fraction is at most ``max(0.01, 3/M)``,
    nothing leaves ``omega`` after entering, and no trajectory failed."""
    M = stats.n_trajectories
    limit = max(1.0 - 0.99, 3.0 / M)
    final = float(stats.outside_fraction[-1])
    exits = int(stats.exits.sum())
    failed = int(stats.failed.sum())
    passed = final <= limit and exits == 0 and failed == 0
    return passed, {"outside_fraction_final": final, "outside_limit": limit, "post_entry_exits": exits, "failed": failed}


@dataclass
class PerformanceReport:
    tail_average: float
    l_ss: float
    relative_gap: float
    std_error: float
    passed: bool
    window: tuple

    def to_json(self) -> dict:
        return {
            "tail_average": self.tail_average,
            "l_ss": self.l_ss,
            "relative_gap": self.relative_gap,
            "std_error": self.std_error,
            "passed": self.passed,
            "window": list(self.window),
            "tolerance": PERF_TOL,
        }


def tail_average(stats: TrajectoryStats, l_ss: float, delta: float = PERF_TOL) -> PerformanceReport:
    """Time average of ``x'Sx`` over ``[K/2, K]``, averaged over trajectories.

    Passes iff the average is at most ``l_ss (1 + delta)``; the signed
    relative gap shows how tight the bound is.
    """
    K = stats.k_max
    lo = K // 2
    per_traj = np.nanmean(stats.stage_cost[:, lo:], axis=1)
    per_traj = per_traj[np.isfinite(per_traj)]
    avg = float(per_traj.mean())
    se = float(per_traj.std(ddof=1) / np.sqrt(per_traj.size)) if per_traj.size > 1 else 0.0
    if l_ss > 0:
        gap = avg / l_ss - 1.0
    else:
        gap = 0.0 if avg == 0 else float("inf")
    passed = avg <= l_ss * (1.0 + delta) + 1e-15
    return PerformanceReport(avg, float(l_ss), float(gap), se, bool(passed), (lo, K))
