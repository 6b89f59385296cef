"""Bounded, zero-mean, i.i.d. disturbance models.

Random streams are counter-based (Philox) generators keyed by a master
seed plus a tuple of integers, so every trajectory owns an independent
substream regardless of how work is scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gamma as gamma_fn

from .setalg import Polytope

UNIFORM_BOX = "uniform_box"
TRUNCATED_GAUSSIAN = "truncated_gaussian"
MIN_ACCEPTANCE = 1e-3
MOMENT_SAMPLES = 1_000_000


class DisturbanceConfigError(ValueError):
    pass


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent Philox generator for ``(seed, *key)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class DisturbanceModel:
    """Disturbance law supported on the box ``[-halfwidth, halfwidth]``.

    ``kind`` is ``uniform_box`` or ``truncated_gaussian`` (zero-mean normal
    with covariance ``cov`` conditioned on the box).  A zero half-width
    gives a degenerate axis (point mass), allowed for testing.
    """

    kind: str
    halfwidth: np.ndarray
    cov: np.ndarray | None = None
    seed: int = 0
    _moment_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        hw = np.asarray(self.halfwidth, dtype=float).reshape(-1)
        if np.any(hw < 0):
            raise DisturbanceConfigError("halfwidth must be nonnegative")
        object.__setattr__(self, "halfwidth", hw)
        if self.kind == TRUNCATED_GAUSSIAN:
            if self.cov is None:
                raise DisturbanceConfigError("truncated_gaussian needs a covariance")
            cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
            if cov.shape != (hw.size, hw.size):
                raise DisturbanceConfigError(f"cov must be {hw.size}x{hw.size}")
            if np.min(np.linalg.eigvalsh(cov)) <= 0:
                raise DisturbanceConfigError("cov must be positive definite")
            object.__setattr__(self, "cov", cov)
        elif self.kind != UNIFORM_BOX:
            raise DisturbanceConfigError(f"unknown disturbance kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return self.halfwidth.size

    @property
    def support(self) -> Polytope:
        return Polytope.box(self.halfwidth)

    def max_norm(self) -> float:
        return float(np.linalg.norm(self.halfwidth))

    def to_json(self) -> dict:
        out = {"kind": self.kind, "halfwidth": self.halfwidth.tolist(), "seed": self.seed}
        if self.cov is not None:
            out["cov"] = self.cov.tolist()
        return out

    @classmethod
    def from_json(cls, obj) -> "DisturbanceModel":
        return cls(obj["kind"], obj["halfwidth"], obj.get("cov"), int(obj.get("seed", 0)))


def uniform_box(halfwidth, seed: int = 0) -> DisturbanceModel:
    return DisturbanceModel(UNIFORM_BOX, halfwidth, seed=seed)


def truncated_gaussian(halfwidth, cov, seed: int = 0) -> DisturbanceModel:
    return DisturbanceModel(TRUNCATED_GAUSSIAN, halfwidth, cov=cov, seed=seed)


def sample(model: DisturbanceModel, rng: np.random.Generator, count: int) -> np.ndarray:
    """Draw ``count`` i.i.d. disturbances, shape ``(count, dim)``."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    q = model.dim
    if count == 0:
        return np.zeros((0, q))
    hw = model.halfwidth
    if model.kind == UNIFORM_BOX:
        return rng.uniform(-1.0, 1.0, size=(count, q)) * hw
    L = np.linalg.cholesky(model.cov)
    out = np.empty((count, q))
    filled = 0
    drawn = 0
    while filled < count:
        batch = max(1024, 2 * (count - filled))
        cand = rng.standard_normal((batch, q)) @ L.T
        ok = np.all(np.abs(cand) <= hw, axis=1)
        drawn += batch
        acc = cand[ok]
        take = min(len(acc), count - filled)
        out[filled:filled + take] = acc[:take]
        filled += take
        if drawn >= 10_000 and filled / drawn < MIN_ACCEPTANCE:
            raise DisturbanceConfigError(
                f"truncated Gaussian acceptance rate {filled / drawn:.2e} below {MIN_ACCEPTANCE}: truncation too tight"
            )
    return out


def second_moment(model: DisturbanceModel, n_samples: int = MOMENT_SAMPLES):
    """``E[w w']``.

    Exact for the uniform box (``diag(halfwidth**2 / 3)``).  For the
    truncated Gaussian a Monte Carlo estimate is returned; its elementwise
    standard error is stored in ``model``'s cache under ``"stderr"``.
    """
    if model.kind == UNIFORM_BOX:
        return np.diag(model.halfwidth**2 / 3.0)
    key = ("second_moment", n_samples)
    if key not in model._moment_cache:
        W = sample(model, stream(model.seed, 0xC0FFEE), n_samples)
        outer = W[:, :, None] * W[:, None, :]
        est = outer.mean(axis=0)
        stderr = outer.std(axis=0, ddof=1) / np.sqrt(n_samples)
        # symmetry of the law makes the mean exactly zero
        model._moment_cache[key] = (0.5 * (est + est.T), stderr)
    return model._moment_cache[key][0]


def second_moment_stderr(model: DisturbanceModel, n_samples: int = MOMENT_SAMPLES):
    if model.kind == UNIFORM_BOX:
        return np.zeros((model.dim, model.dim))
    second_moment(model, n_samples)
    return model._moment_cache[("second_moment", n_samples)][1]


def _ball_volume(n: int, r: float) -> float:
    return np.pi ** (n / 2) / gamma_fn(n / 2 + 1) * r**n


@dataclass(frozen=True)
class BallProbability:
    estimate: float
    std_error: float
    lower_bound: float | None

    def certified_lower(self, floor: float = 1e-12) -> float:
        """Lower bound usable as ``p_eps``.

        Analytic bound when available, else ``estimate - 3 std_error``,
        floored at ``floor``.
        """
        if self.lower_bound is not None and self.lower_bound > 0:
            return max(self.lower_bound, floor)
        return max(self.estimate - 3.0 * self.std_error, floor)


def ball_probability(model: DisturbanceModel, lam: float, n_samples: int = 100_000, rng=None) -> BallProbability:
    """Monte Carlo estimate of ``P{||w||_2 <= lam}`` with binomial std error.

    For the uniform box the volume ratio of the ball of radius
    ``min(lam, min halfwidth)`` to the box is also returned as an analytic
    lower bound.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    rng = stream(model.seed, 0xBA11) if rng is None else rng
    W = sample(model, rng, n_samples)
    hits = np.linalg.norm(W, axis=1) <= lam
    p = float(hits.mean())
    se = float(np.sqrt(max(p * (1 - p), 0.0) / n_samples))
    lower = None
    if model.kind == UNIFORM_BOX:
        hw = model.halfwidth
        if lam >= np.linalg.norm(hw):
            lower = 1.0
        elif np.all(hw > 0):
            r = min(lam, float(np.min(hw)))
            lower = float(_ball_volume(model.dim, r) / np.prod(2 * hw))
    return BallProbability(p, se, lower)
