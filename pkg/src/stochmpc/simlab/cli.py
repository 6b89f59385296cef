"""Command-line interface: ``stochmpc <subcommand> --config cfg.json [--seed N] [--out DIR] [--jobs N]``.

Exit status is 0 on success or PASS, 2 on a certification FAIL and 1 on
any error (bad config, infeasible design, unknown subcommand).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .. import lti, setalg, smpc_affine, smpc_striped
from . import experiment as ex
from .config import ConfigError, load_config

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FAIL = 2
SEED_ENV = "STOCHMPC_SEED"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", required=True, help="experiment JSON file")
    p.add_argument("--seed", type=int, default=None, help=f"master seed (overrides ${SEED_ENV} and the config)")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for simulation")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stochmpc", description="Stochastic MPC convergence experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _common()
    helps = {
        "design-affine": "build the affine disturbance-feedback controller and write its design file",
        "design-striped": "synthesise the striped controller and write its design file",
        "mrpi": "outer approximation of the minimal RPI set of A + BK",
        "riccati": "solve the Riccati equation for (A, B, Q, R)",
        "simulate": "run Monte Carlo closed-loop trajectories",
        "certify": "Monte Carlo convergence certificate (exit 2 on FAIL)",
        "perf": "tail-window average cost against l_ss (exit 2 on FAIL)",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    rep = sub.add_parser("report", help="merge summary.json / curves.csv from run directories")
    rep.add_argument("inputs", nargs="+", help="run directories to merge")
    rep.add_argument("--out", default="report", help="output directory")
    return parser


def _seed(args, cfg) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ConfigError(SEED_ENV, f"not an integer: {env!r}") from None
    return cfg.seed


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None if np.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _summary(out: Path, command: str, seed, body: dict) -> None:
    doc = {"command": command, "seed": seed, **body, "generated_at": datetime.now(timezone.utc).isoformat()}
    write_json(out / "summary.json", doc)


def write_trajectories(path: Path, res: ex.RunResult) -> None:
    states, inputs = res.batch.states, res.batch.inputs
    M, K1, n = states.shape
    m = 0 if inputs is None else inputs.shape[2]
    cols = [np.repeat(np.arange(M), K1), np.tile(np.arange(K1), M)]
    cols += [states[:, :, c].reshape(-1) for c in range(n)]
    if m:
        padded = np.concatenate([inputs, np.full((M, 1, m), np.nan)], axis=1)
        cols += [padded[:, :, c].reshape(-1) for c in range(m)]
    cols += [res.stats.stage_cost.reshape(-1), res.stats.in_omega.reshape(-1).astype(int)]
    header = ["traj_id", "k"] + [f"x{c}" for c in range(n)] + [f"u{c}" for c in range(m)] + ["stage_cost", "in_omega"]
    fmt = ["%d", "%d"] + ["%.17g"] * (n + m + 1) + ["%d"]
    np.savetxt(path, np.column_stack(cols), fmt=fmt, delimiter=",", header=",".join(header), comments="")


def write_curves(path: Path, res: ex.RunResult, tail) -> None:
    K1 = res.stats.outside_fraction.size
    tail = np.asarray(tail if len(tail) else [np.nan] * K1, float)
    data = np.column_stack([np.arange(K1), res.stats.outside_fraction, tail, res.stats.mean_stage_cost()])
    np.savetxt(path, data, fmt=["%d", "%.17g", "%.17g", "%.17g"], delimiter=",",
               header="k,empirical_outside_fraction,tail_bound,mean_stage_cost", comments="")


def _write_run(out: Path, cfg, res, tail=()) -> None:
    if cfg.output.write_trajectories:
        write_trajectories(out / "trajectories.csv", res)
    write_curves(out / "curves.csv", res, tail)


def cmd_riccati(cfg, seed, out, jobs):
    sys_ = ex.build_system(cfg)
    ric = lti.dare(sys_, cfg.weights.Q, cfg.weights.R)
    phi = sys_.a_matrix + sys_.b_matrix @ ric.k_gain
    body = {
        "P": ric.p_matrix, "K": ric.k_gain, "residual": ric.residual, "iterations": ric.iterations,
        "closed_loop_spectral_radius": lti.spectral_radius(phi),
    }
    write_json(out / "riccati.json", body)
    _summary(out, "riccati", seed, body)
    return EXIT_OK


def cmd_mrpi(cfg, seed, out, jobs):
    st = ex.setup(cfg)
    om = ex.omega_set(st)
    ok, margin = setalg.certify_rpi(om.outer, st.phi, st.sys.d_matrix, st.dist.support)
    body = {
        "phi": st.phi, "eps": cfg.certificate.mrpi_eps, "hausdorff_gap": om.hausdorff_gap,
        "n_terms": om.n_terms, "alpha": om.alpha, "outer": om.outer.to_json(), "inner": om.inner.to_json(),
        "rpi_certified": ok, "rpi_margin": margin,
    }
    if om.outer.dim == 1:
        body["interval"] = [-om.outer.support([-1.0]), om.outer.support([1.0])]
    write_json(out / "mrpi.json", body)
    _summary(out, "mrpi", seed, body)
    return EXIT_OK if ok else EXIT_FAIL


def _design_cmd(kind):
    def run(cfg, seed, out, jobs):
        cfg = cfg.model_copy(deep=True)
        cfg.controller.type = kind
        cfg.controller.design_file = None
        st = ex.setup(cfg)
        if kind == "affine":
            doc = smpc_affine.design_to_json(st.design)
            body = {"controller": kind, "terminal_halfspaces": st.design.terminal_set.n_halfspaces,
                    "stage_replicas": st.design.stage_replicas, "n_decision": st.design.n_decision}
        else:
            doc = smpc_striped.design_to_json(st.design)
            lin = smpc_striped.check_assumption5(
                st.design, ex.omega_set(st), cfg.certificate.linearity_probes, rng=ex.stream(seed, 5)
            )
            doc["mrpi_linearity"] = lin.to_json()
            body = {"controller": kind, "n2": st.design.n2, "gains": st.design.gains,
                    "gamma": st.design.gamma, "mrpi_linearity": lin.to_json()}
        name = f"design_{kind}.json"
        write_json(out / name, doc)
        body["design_file"] = name
        _summary(out, f"design-{kind}", seed, body)
        return EXIT_OK
    return run


def cmd_simulate(cfg, seed, out, jobs):
    res = ex.run(cfg, seed, jobs)
    _write_run(out, cfg, res)
    body = {"controller": cfg.controller.type, "stats": res.stats.to_json(), "qp_solves": res.batch.qp_solves,
            "l_ss": ex.l_ss(res.setup)}
    _summary(out, "simulate", seed, body)
    return EXIT_OK


def cmd_certify(cfg, seed, out, jobs):
    r = ex.certify_convergence(cfg, seed, jobs)
    res = r["result"]
    _write_run(out, cfg, res, r["tail_curve"])
    cert = r["certificate"] or {}
    body = {
        "controller": cfg.controller.type,
        "verdict": "PASS" if r["passed"] else "FAIL",
        "criteria": r["criteria"],
        "omega": r["omega"],
        "stats": res.stats.to_json(),
        "certificate": cert,
        "horizons": {"N_f": cert.get("n_f"), "N_p": cert.get("n_p")},
        "tail_bound": r["tail_curve"],
        "l_ss": r["performance"].l_ss,
        "performance": r["performance"].to_json(),
        "qp_solves": res.batch.qp_solves,
    }
    _summary(out, "certify", seed, body)
    return EXIT_OK if r["passed"] else EXIT_FAIL


def cmd_perf(cfg, seed, out, jobs):
    r = ex.average_performance(cfg, seed, jobs)
    res = r["result"]
    _write_run(out, cfg, res)
    perf = r["performance"]
    body = {"controller": cfg.controller.type, "verdict": "PASS" if perf.passed else "FAIL",
            "l_ss": perf.l_ss, "performance": perf.to_json(), "stats": res.stats.to_json()}
    _summary(out, "perf", seed, body)
    return EXIT_OK if perf.passed else EXIT_FAIL


def cmd_report(inputs, out):
    runs = []
    for d in inputs:
        path = Path(d) / "summary.json"
        if not path.exists():
            raise FileNotFoundError(f"no summary.json in {d}")
        doc = json.loads(path.read_text())
        doc.pop("generated_at", None)
        entry = {"dir": str(d), "command": doc.get("command"), "seed": doc.get("seed"),
                 "controller": doc.get("controller"), "verdict": doc.get("verdict")}
        for key in ("l_ss", "performance", "criteria", "horizons", "stats"):
            if key in doc:
                entry[key] = doc[key]
        curves = Path(d) / "curves.csv"
        if curves.exists():
            data = np.loadtxt(curves, delimiter=",", skiprows=1, ndmin=2)
            entry["curves"] = {"rows": int(data.shape[0]), "final_outside_fraction": float(data[-1, 1])}
        runs.append(entry)
    verdicts = [r["verdict"] for r in runs if r["verdict"] is not None]
    overall = "FAIL" if "FAIL" in verdicts else ("PASS" if verdicts else None)
    write_json(out / "report.json", {"runs": runs, "overall": overall})
    _summary(out, "report", None, {"runs": runs, "overall": overall})
    return EXIT_FAIL if overall == "FAIL" else EXIT_OK


COMMANDS = {
    "design-affine": _design_cmd("affine"),
    "design-striped": _design_cmd("striped"),
    "mrpi": cmd_mrpi,
    "riccati": cmd_riccati,
    "simulate": cmd_simulate,
    "certify": cmd_certify,
    "perf": cmd_perf,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "report":
            return cmd_report(args.inputs, out)
        if args.jobs < 1:
            raise ConfigError("--jobs", "must be at least 1")
        cfg = load_config(args.config)
        seed = _seed(args, cfg)
        return COMMANDS[args.command](cfg, seed, out, args.jobs)
    except ConfigError as exc:
        where = f" at {exc.path}" if exc.path else ""
        print(f"stochmpc: config error{where}: {exc.message}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"stochmpc: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
