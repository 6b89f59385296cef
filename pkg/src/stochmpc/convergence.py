"""ISS-based almost-sure convergence calculus.

Comparison functions, the disturbance window on which an ISS-Lyapunov
function strictly decreases, the horizons ``N_f`` and ``N_p``, the
geometric tail bound on ``P{x_k not in Omega}``, and the asymptotic
average-cost value ``l_ss`` of a linear loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import lti
from .dist import DisturbanceModel, sample
from .setalg import GeometryError, Polytope

ISS_TOL = 1e-8
DEFAULT_LAMBDA = 0.5
MIN_ISS_SAMPLES = 1000


class KFunction:
    """Continuous, strictly increasing ``phi`` with ``phi(0) = 0``.

    Either the power law ``c * s**p`` or a monotone table with linear
    interpolation (and linear extrapolation past the last knot).
    """

    def __init__(self, coeff: float | None = None, power: float | None = None, grid=None, values=None):
        if grid is not None:
            s = np.asarray(grid, dtype=float)
            v = np.asarray(values, dtype=float)
            if s.ndim != 1 or s.shape != v.shape or s.size < 2:
                raise ValueError("grid and values must be 1-D arrays of equal length >= 2")
            if s[0] != 0 or v[0] != 0:
                raise ValueError("tabulated K-function must start at (0, 0)")
            if np.any(np.diff(s) <= 0) or np.any(np.diff(v) <= 0):
                raise ValueError("tabulated K-function must be strictly increasing")
            self.kind = "table"
            self.grid, self.values = s, v
        else:
            if coeff is None or power is None or coeff <= 0 or power <= 0:
                raise ValueError("power K-function needs coeff > 0 and power > 0")
            self.kind = "power"
            self.coeff, self.power = float(coeff), float(power)

    @classmethod
    def power_law(cls, coeff: float, power: float) -> "KFunction":
        return cls(coeff=coeff, power=power)

    @classmethod
    def table(cls, grid, values) -> "KFunction":
        return cls(grid=grid, values=values)

    @classmethod
    def from_json(cls, obj) -> "KFunction":
        if "grid" in obj:
            return cls.table(obj["grid"], obj["values"])
        return cls.power_law(obj["coeff"], obj["power"])

    def to_json(self) -> dict:
        if self.kind == "table":
            return {"grid": self.grid.tolist(), "values": self.values.tolist()}
        return {"coeff": self.coeff, "power": self.power}

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if np.any(s < 0):
            raise ValueError("K-functions are defined on the nonnegative reals")
        if self.kind == "power":
            out = self.coeff * s**self.power
        else:
            slope = (self.values[-1] - self.values[-2]) / (self.grid[-1] - self.grid[-2])
            out = np.where(
                s <= self.grid[-1],
                np.interp(s, self.grid, self.values),
                self.values[-1] + slope * (s - self.grid[-1]),
            )
        return float(out) if out.ndim == 0 else out

    def inverse(self, v, tol: float = 1e-12):
        v = float(v)
        if v < 0:
            raise ValueError("inverse needs a nonnegative value")
        if self.kind == "power":
            return (v / self.coeff) ** (1.0 / self.power)
        lo, hi = 0.0, float(self.grid[-1])
        while self(hi) < v:
            hi *= 2.0
        while hi - lo > tol * max(1.0, hi):
            mid = 0.5 * (lo + hi)
            if self(mid) < v:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def scaled(self, factor: float) -> "KFunction":
        if self.kind == "power":
            return KFunction.power_law(factor * self.coeff, self.power)
        return KFunction.table(self.grid, factor * self.values)

    def __repr__(self):
        if self.kind == "power":
            return f"KFunction({self.coeff:g} * s^{self.power:g})"
        return f"KFunction(table, {self.grid.size} knots)"


@dataclass
class IssCertificate:
    """Candidate ISS-Lyapunov function with its comparison functions."""

    lyapunov: Callable[[np.ndarray], float]
    alpha1: KFunction
    alpha2: KFunction
    alpha3: KFunction
    sigma: KFunction
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ValueError("lambda must lie in (0, 1)")

    @property
    def xi(self) -> KFunction:
        """Guaranteed decrease rate on the window: ``(1 - lam) * alpha3``."""
        return self.alpha3.scaled(1.0 - self.lam)


@dataclass
class IssReport:
    passed: bool
    n_samples: int
    max_violation: float
    n_violations: int
    sandwich_violation: float
    witnesses: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "passed": self.passed,
            "n_samples": self.n_samples,
            "max_violation": self.max_violation,
            "n_violations": self.n_violations,
            "sandwich_violation": self.sandwich_violation,
            "witnesses": [{"x": list(map(float, x)), "w": list(map(float, w)), "violation": float(v)} for x, w, v in self.witnesses],
        }


def validate_iss(
    cert: IssCertificate,
    closed_loop: Callable,
    state_sampler: Callable[[np.random.Generator, int], np.ndarray],
    dist_model: DisturbanceModel,
    n: int,
    rng: np.random.Generator,
    tol: float = ISS_TOL,
    max_witnesses: int = 5,
) -> IssReport:
    """Sample ``(x, w)`` pairs and check the sandwich bounds and the
    dissipation inequality ``V(f(x,w)) - V(x) <= -alpha3(|x|) + sigma(|w|)``.

    ``closed_loop(x, w)`` returns the successor state.  Passes iff the
    largest violation of either condition is at most ``tol``.
    """
    if n < MIN_ISS_SAMPLES:
        raise ValueError(f"n must be at least {MIN_ISS_SAMPLES}")
    X = np.atleast_2d(state_sampler(rng, n))
    W = sample(dist_model, rng, n)
    worst, count, sandwich = -np.inf, 0, 0.0
    found = []
    for x, w in zip(X, W):
        nx, nw = float(np.linalg.norm(x)), float(np.linalg.norm(w))
        V = cert.lyapunov(x)
        sandwich = max(sandwich, cert.alpha1(nx) - V, V - cert.alpha2(nx))
        v = cert.lyapunov(closed_loop(x, w)) - V + cert.alpha3(nx) - cert.sigma(nw)
        worst = max(worst, v)
        if v > tol:
            count += 1
            found.append((x.copy(), w.copy(), v))
    found.sort(key=lambda t: -t[2])
    passed = worst <= tol and sandwich <= tol
    return IssReport(passed, n, float(worst), count, float(sandwich), found[:max_witnesses])


def level_set_radius(omega: Polytope) -> float:
    """Radius of the largest origin-centred Euclidean ball inside ``omega``."""
    norms = np.linalg.norm(omega.A, axis=1)
    if np.any(omega.b <= 0):
        raise GeometryError("origin is not in the interior of omega")
    return float(np.min(omega.b / norms))


@dataclass(frozen=True)
class DisturbanceWindow:
    """Ball ``{w : ||w|| <= radius}`` on which the Lyapunov decrease is strict."""

    radius: float
    capped: bool

    def contains(self, w) -> bool:
        return float(np.linalg.norm(w)) <= self.radius


def disturbance_window(cert: IssCertificate, z: float, w_max: float | None = None) -> DisturbanceWindow:
    """Window radius ``sigma^{-1}(lam * alpha3(z))``.

    When ``w_max`` (largest disturbance norm on the support) is given and
    the radius exceeds it, the window is the whole support (``capped``).
    """
    if z <= 0:
        raise ValueError("z must be positive")
    r = cert.sigma.inverse(cert.lam * cert.alpha3(z))
    if w_max is not None and r >= w_max:
        return DisturbanceWindow(float(w_max), True)
    return DisturbanceWindow(float(r), False)


def horizon_nf(cert: IssCertificate, r: float, eps: float) -> int:
    """Steps of small disturbances that force entry: ``ceil(alpha2(r) / xi(eps))``, at least 1."""
    if r < 0:
        raise ValueError("r must be nonnegative")
    if eps <= 0:
        raise ValueError("eps must be positive")
    denom = cert.xi(eps)
    if denom <= 0:
        raise ValueError("xi(eps) is zero")
    return max(1, math.ceil(cert.alpha2(r) / denom))


def horizon_np(p: float, p_eps: float, n_f: int) -> int:
    """Horizon after which ``P{x in Omega} >= 1 - p``.

    ``N_f * ceil(log p / log(1 - p_eps**N_f))`` for ``p_eps < 1``; ``N_f``
    when ``p_eps == 1``.  ``p == 1`` makes the formula 0, which is clamped to
    ``N_f``.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError("p must lie in (0, 1]")
    if not 0.0 < p_eps <= 1.0:
        raise ValueError("p_eps must lie in (0, 1]; zero violates the small-disturbance assumption")
    if n_f < 1:
        raise ValueError("n_f must be at least 1")
    if p_eps == 1.0 or p == 1.0:
        return n_f
    q = p_eps**n_f
    if q <= 0.0:
        raise ValueError("p_eps**n_f underflows to zero")
    blocks = max(1, math.ceil(math.log(p) / math.log1p(-q)))
    while tail_bound(blocks * n_f, p_eps, n_f) > p:  # guard against rounding in the ceil
        blocks += 1
    return n_f * blocks


def tail_bound(k: int, p_eps: float, n_f: int) -> float:
    """``(1 - p_eps**N_f) ** floor(k / N_f)``."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    blocks = k // n_f
    if blocks == 0:
        return 1.0
    q = p_eps**n_f
    if q >= 1.0:
        return 0.0
    return float(math.exp(blocks * math.log1p(-q)))  # log1p keeps precision when q is tiny


def lss(phi, d_matrix, s_matrix, sigma_w) -> float:
    """Asymptotic average of ``x'Sx`` for ``x+ = phi x + D w``: ``trace(D'PD Sigma_w)``."""
    P = lti.dlyap(phi, s_matrix)
    D = np.atleast_2d(np.asarray(d_matrix, float))
    return float(np.trace(D.T @ P @ D @ np.atleast_2d(sigma_w)))


@dataclass
class ConvergenceCertificate:
    """Theoretical horizons and empirical evidence for entry into ``Omega``."""

    eps: float
    window_radius: float | None = None
    p_eps: float | None = None
    n_f: int | None = None
    n_p: dict = field(default_factory=dict)
    r_bound: float | None = None
    tail_curve: list = field(default_factory=list)
    empirical_curve: list = field(default_factory=list)
    iss_report: IssReport | None = None
    verdict: str = "UNKNOWN"
    details: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "eps": self.eps,
            "window_radius": self.window_radius,
            "p_eps": self.p_eps,
            "n_f": self.n_f,
            "n_p": {str(k): v for k, v in self.n_p.items()},
            "r_bound": self.r_bound,
            "iss": None if self.iss_report is None else self.iss_report.to_json(),
            "verdict": self.verdict,
            "details": self.details,
        }


def build_certificate(
    cert: IssCertificate,
    omega: Polytope,
    dist_model: DisturbanceModel,
    r_bound: float,
    k_max: int,
    p_levels=(0.2, 0.05, 0.01),
    n_samples: int = 100_000,
) -> ConvergenceCertificate:
    """Evaluate the theoretical chain ``eps -> W(eps) -> p_eps -> N_f -> N_p``."""
    from .dist import ball_probability

    eps = level_set_radius(omega)
    window = disturbance_window(cert, eps, w_max=dist_model.max_norm())
    bp = ball_probability(dist_model, window.radius, n_samples=n_samples)
    p_eps = min(1.0, bp.certified_lower())
    n_f = horizon_nf(cert, r_bound, eps)
    n_p = {}
    for p in p_levels:
        try:
            n_p[p] = horizon_np(p, p_eps, n_f)
        except (ValueError, OverflowError):
            n_p[p] = None
    curve = [tail_bound(k, p_eps, n_f) for k in range(k_max + 1)]
    return ConvergenceCertificate(
        eps=eps,
        window_radius=window.radius,
        p_eps=p_eps,
        n_f=n_f,
        n_p=n_p,
        r_bound=r_bound,
        tail_curve=curve,
        details={"window_capped": window.capped, "p_eps_estimate": bp.estimate, "p_eps_stderr": bp.std_error},
    )


def fit_certificate(
    lyapunov: Callable,
    closed_loop: Callable,
    X: np.ndarray,
    W: np.ndarray,
    alpha1_coeff: float,
    alpha3_coeff: float,
    margin: float = 2.0,
    lam: float = DEFAULT_LAMBDA,
) -> IssCertificate:
    """Quadratic sandwich and decrease terms with a linear gain ``sigma(s) = c s``.

    ``alpha1`` and ``alpha3`` come from structure (e.g. eigenvalues of
    ``P`` and ``Q``); ``alpha2`` and ``c`` are the largest ratios seen on
    the fitting pairs ``(X, W)``, inflated by ``margin``.  Validate on fresh
    samples with :func:`validate_iss`.
    """
    a2, c = 0.0, 0.0
    for x, w in zip(X, W):
        nx, nw = float(np.linalg.norm(x)), float(np.linalg.norm(w))
        V = lyapunov(x)
        if nx > 0:
            a2 = max(a2, V / nx**2)
        if nw > 0:
            excess = lyapunov(closed_loop(x, w)) - V + alpha3_coeff * nx**2
            c = max(c, excess / nw)
    return IssCertificate(
        lyapunov=lyapunov,
        alpha1=KFunction.power_law(alpha1_coeff, 2.0),
        alpha2=KFunction.power_law(max(margin * a2, alpha1_coeff), 2.0),
        alpha3=KFunction.power_law(alpha3_coeff, 2.0),
        sigma=KFunction.power_law(max(margin * c, 1e-12), 1.0),
        lam=lam,
    )
