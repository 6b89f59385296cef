"""Experiment configuration (one JSON document) and its validation."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator


class ConfigError(ValueError):
    """Malformed configuration; ``path`` locates the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


def _loc(parts) -> str:
    out = ""
    for p in parts:
        if isinstance(p, int):
            out += f"[{p}]"
        else:
            out += ("." if out else "") + str(p)
    return out


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


Matrix = list[list[float]]


class SystemCfg(_Strict):
    A: Matrix
    B: Matrix
    D: Matrix | None = None


class HalfspacesCfg(_Strict):
    A: Matrix
    b: list[float]


class ConstraintsCfg(_Strict):
    x_lower: list[float] | None = None
    x_upper: list[float] | None = None
    u_lower: list[float] | None = None
    u_upper: list[float] | None = None
    halfspaces: HalfspacesCfg | None = None


class WeightsCfg(_Strict):
    Q: Matrix
    R: Matrix


class DisturbanceCfg(_Strict):
    kind: Literal["uniform_box", "truncated_gaussian"] = "uniform_box"
    halfwidth: list[float]
    cov: Matrix | None = None
    seed: int = 0

    @field_validator("halfwidth")
    @classmethod
    def _nonneg(cls, v):
        if any(h < 0 for h in v):
            raise ValueError("half-widths must be nonnegative")
        return v


class ChanceCfg(_Strict):
    f: Matrix
    g: Matrix
    h: list[float]
    p: list[float]


class ControllerCfg(_Strict):
    type: Literal["affine", "striped", "linear"] = "affine"
    horizon: int = Field(3, ge=1)
    K: Matrix | None = None
    chance: ChanceCfg | None = None
    quantile_samples: int = Field(100_000, ge=10_000)
    design_file: str | None = None


class InitialStatesCfg(_Strict):
    points: Matrix | None = None
    lower: list[float] | None = None
    upper: list[float] | None = None


class CertificateCfg(_Strict):
    mrpi_eps: float = Field(1e-3, gt=0)
    lam: float = Field(0.5, gt=0, lt=1)
    iss_samples: int = Field(1000, ge=1000)
    p_levels: list[float] = [0.2, 0.05, 0.01]
    ball_samples: int = Field(100_000, ge=1)
    linearity_probes: int = Field(500, ge=0)


class OutputCfg(_Strict):
    write_trajectories: bool = True


class ExperimentConfig(_Strict):
    name: str = "experiment"
    system: SystemCfg
    constraints: ConstraintsCfg | None = None
    weights: WeightsCfg
    disturbance: DisturbanceCfg
    controller: ControllerCfg = ControllerCfg()
    initial_states: InitialStatesCfg = InitialStatesCfg()
    k_max: int = Field(500, ge=1)
    n_trajectories: int = Field(500, ge=1)
    seed: int = 0
    certificate: CertificateCfg = CertificateCfg()
    output: OutputCfg = OutputCfg()


def _shape(m):
    rows = len(m)
    cols = {len(r) for r in m}
    if rows == 0 or len(cols) != 1:
        return None
    return rows, cols.pop()


def check_dimensions(cfg: ExperimentConfig) -> None:
    """Cross-field consistency; raises :class:`ConfigError` with the field path."""
    sa = _shape(cfg.system.A)
    if sa is None or sa[0] != sa[1]:
        raise ConfigError("system.A", "must be a non-empty square matrix")
    n = sa[0]
    sb = _shape(cfg.system.B)
    if sb is None or sb[0] != n:
        raise ConfigError("system.B", f"must have {n} rows")
    m = sb[1]
    q = n
    if cfg.system.D is not None:
        sd = _shape(cfg.system.D)
        if sd is None or sd[0] != n:
            raise ConfigError("system.D", f"must have {n} rows")
        q = sd[1]
    if _shape(cfg.weights.Q) != (n, n):
        raise ConfigError("weights.Q", f"must be {n}x{n}")
    if _shape(cfg.weights.R) != (m, m):
        raise ConfigError("weights.R", f"must be {m}x{m}")
    if len(cfg.disturbance.halfwidth) != q:
        raise ConfigError("disturbance.halfwidth", f"needs {q} entries to match D")
    if cfg.disturbance.kind == "truncated_gaussian":
        if cfg.disturbance.cov is None or _shape(cfg.disturbance.cov) != (q, q):
            raise ConfigError("disturbance.cov", f"truncated_gaussian needs a {q}x{q} covariance")
    c = cfg.constraints
    if cfg.controller.type in ("affine", "striped") and c is None:
        raise ConfigError("constraints", f"required for the {cfg.controller.type} controller")
    if c is not None:
        for name, size in (("x_lower", n), ("x_upper", n), ("u_lower", m), ("u_upper", m)):
            v = getattr(c, name)
            if v is not None and len(v) != size:
                raise ConfigError(f"constraints.{name}", f"needs {size} entries")
        if c.halfspaces is not None:
            sh = _shape(c.halfspaces.A)
            if sh is None or sh[1] != n + m:
                raise ConfigError("constraints.halfspaces.A", f"rows must have n + m = {n + m} entries")
            if len(c.halfspaces.b) != sh[0]:
                raise ConfigError("constraints.halfspaces.b", f"needs {sh[0]} entries")
    if cfg.controller.K is not None and _shape(cfg.controller.K) != (m, n):
        raise ConfigError("controller.K", f"must be {m}x{n}")
    ch = cfg.controller.chance
    if ch is not None:
        nc = len(ch.h)
        if _shape(ch.f) != (nc, n):
            raise ConfigError("controller.chance.f", f"must be {nc}x{n}")
        if _shape(ch.g) != (nc, m):
            raise ConfigError("controller.chance.g", f"must be {nc}x{m}")
        if len(ch.p) != nc:
            raise ConfigError("controller.chance.p", f"needs {nc} entries")
        for j, p in enumerate(ch.p):
            if not 0 < p <= 1:
                raise ConfigError(f"controller.chance.p[{j}]", "must lie in (0, 1]")
    ini = cfg.initial_states
    if ini.points is not None:
        for i, pt in enumerate(ini.points):
            if len(pt) != n:
                raise ConfigError(f"initial_states.points[{i}]", f"needs {n} entries")
    for name in ("lower", "upper"):
        v = getattr(ini, name)
        if v is not None and len(v) != n:
            raise ConfigError(f"initial_states.{name}", f"needs {n} entries")
    if (ini.lower is None) != (ini.upper is None):
        raise ConfigError("initial_states", "lower and upper must be given together")
    for j, p in enumerate(cfg.certificate.p_levels):
        if not 0 < p <= 1:
            raise ConfigError(f"certificate.p_levels[{j}]", "must lie in (0, 1]")


def parse_config(obj) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(obj)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigError(_loc(err["loc"]), err["msg"]) from None
    check_dimensions(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("", f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(obj)
