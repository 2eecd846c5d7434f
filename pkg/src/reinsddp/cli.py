"""Command-line front end.

Four subcommands share one TOML run file::

    reinsddp simulate  --config run.toml   # Monte Carlo of the configured strategy
    reinsddp ddp       --config run.toml   # bound iteration, writes iterations.csv
    reinsddp check-hjb --config run.toml   # re-certify the latest saved value bound
    reinsddp moments   --config run.toml   # moment matrices of a saved occupation system

Every run writes a ``manifest.json`` next to its artifacts recording the
config hash, master seed, library versions, worker setting, and wall-clock
timings.  Artifacts are written to a temp file and renamed into place, so a
crash never leaves a half-written file under the output directory.

Exit codes: 0 success, 2 bad config or arguments, 3 model/artifact error,
4 solver failure, 5 a certificate or feasibility check failed.
"""
from __future__ import annotations

import argparse
import dataclasses
import glob
import hashlib
import json
import math
import os
import platform
import sys
import time
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, RunConfig, config_to_doc, parse_config
from .ddp import DdpError, _atomic_write, run_ddp
from .generator import PolyValueFn, RetentionFamily, check_dual_feasibility, \
    hjb_residual
from .models import ModelError
from .moments import moments_from_atoms, putinar_check
from .occupation import build_occupation, extend_negative, system_from_json, \
    system_to_json
from .simulate import simulate_ensemble

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_MODEL = 3
EXIT_SOLVER = 4
EXIT_FEASIBILITY = 5

_WORKERS_VAR = "REINSDDP_WORKERS"

_RUNS_COLUMNS = ("n_paths", "x0", "horizon", "mean", "std_error",
                 "ruin_fraction", "dividends", "injections", "penalty")


def _versions() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "reinsddp": __version__,
    }


def _workers() -> int:
    raw = os.environ.get(_WORKERS_VAR, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{_WORKERS_VAR}: expected an integer, got {raw!r}") \
            from None
    if n < 1:
        raise ConfigError(f"{_WORKERS_VAR}: must be >= 1, got {n}")
    return n


def _config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(config_to_doc(cfg), sort_keys=True,
                       separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _write_manifest(out_dir: str, subcommand: str, cfg: RunConfig,
                    timings: Dict[str, float], artifacts: List[str],
                    error: Optional[str] = None) -> None:
    doc = {
        "subcommand": subcommand,
        "config_sha256": _config_hash(cfg),
        "seed": cfg.seed,
        "versions": _versions(),
        "workers": _workers(),
        "timings": {k: round(v, 6) for k, v in timings.items()},
        "artifacts": sorted(artifacts),
    }
    if error is not None:
        doc["error"] = error
    _atomic_write(os.path.join(out_dir, "manifest.json"),
                  json.dumps(doc, indent=1, sort_keys=True))


def _cmd_simulate(cfg: RunConfig, out_dir: str,
                  timings: Dict[str, float]) -> Tuple[int, List[str]]:
    model, strategy = cfg.model, cfg.strategy
    n_paths = cfg.ddp.n_paths
    horizon = cfg.bounds.horizon
    children = np.random.SeedSequence(cfg.seed).spawn(2)

    t0 = time.perf_counter()
    recs = simulate_ensemble(model, strategy, cfg.x0, horizon, n_paths,
                             children[0])
    gains = np.array([r.gain for r in recs])
    sem = float(np.std(gains, ddof=1) / math.sqrt(n_paths)) if n_paths > 1 \
        else 0.0
    row = (float(n_paths), cfg.x0, horizon, float(gains.mean()), sem,
           float(np.mean([r.ruined for r in recs])),
           float(np.mean([r.dividends_disc for r in recs])),
           float(np.mean([r.injections_disc for r in recs])),
           float(np.mean([r.penalty_disc for r in recs])))
    timings["simulate"] = time.perf_counter() - t0

    lines = [",".join(_RUNS_COLUMNS), ",".join(repr(v) for v in row)]
    _atomic_write(os.path.join(out_dir, "runs.csv"), "\n".join(lines) + "\n")

    # A smaller recorded ensemble feeds the occupation system; full event
    # records for 1e4+ paths would dominate the run for no extra information.
    t0 = time.perf_counter()
    n_rec = min(n_paths, 500)
    x0_sim = max(cfg.x0, 0.0)
    recorded = simulate_ensemble(model, strategy, x0_sim, horizon, n_rec,
                                 children[1], record=True)
    occ = build_occupation(recorded, model, strategy, x0_sim, horizon,
                           grid=cfg.ddp.occupation_grid, bounds=cfg.bounds,
                           h=cfg.ddp.h, seed=cfg.seed)
    if cfg.x0 < 0.0:
        occ = extend_negative(cfg.x0, model, occ,
                              model.premium.norm0 / model.q)
    _atomic_write(os.path.join(out_dir, "occupation.json"),
                  system_to_json(occ))
    timings["occupation"] = time.perf_counter() - t0

    print(f"simulate: {n_paths} paths, gain {row[3]:.6f} +- {sem:.6f} "
          f"(ruin fraction {row[5]:.3f})")
    return EXIT_OK, ["runs.csv", "occupation.json"]


def _cmd_ddp(cfg: RunConfig, out_dir: str,
             timings: Dict[str, float]) -> Tuple[int, List[str]]:
    t0 = time.perf_counter()
    logs = run_ddp(cfg.model, cfg.bounds, cfg.x0, cfg.t1, cfg.ddp,
                   out_dir=out_dir)
    timings["ddp"] = time.perf_counter() - t0
    for log in logs:
        print(f"iteration {log.z}: F_LB {log.f_lb:.6f} +- {log.std_error:.6f}"
              f"  phi(x0) {log.phi_at_x0:.6f}  gap {log.gap:.6f}"
              f"  [{log.status}]")
    artifacts = ["iterations.csv"] + \
        [f"iteration_{log.z:03d}.json" for log in logs]
    return EXIT_OK, artifacts


def _latest_bundle(out_dir: str) -> Optional[dict]:
    paths = sorted(glob.glob(os.path.join(out_dir, "iteration_*.json")))
    if not paths:
        return None
    with open(paths[-1], "r") as fh:
        return json.load(fh)


def _cmd_check_hjb(cfg: RunConfig, out_dir: str,
                   timings: Dict[str, float]) -> Tuple[int, List[str]]:
    bundle = _latest_bundle(out_dir)
    if bundle is None:
        raise ModelError(f"no iteration_*.json found under {out_dir}; "
                         "run the ddp subcommand first")
    spec = bundle["phi"]
    phi = PolyValueFn.from_coeffs(spec["coeffs"], r=spec["r"],
                                  eps_slack=spec["eps"])
    family = RetentionFamily(cfg.ddp.retention_kind)

    t0 = time.perf_counter()
    report = check_dual_feasibility(cfg.model, phi, cfg.bounds,
                                    retentions=family)
    ys = np.linspace(cfg.bounds.xmin, cfg.bounds.xmax, 257)
    rows = []
    for y in ys:
        pos, neg = hjb_residual(cfg.model, phi, float(y), retentions=family)
        resid = pos if pos is not None else neg
        rows.append((float(y), phi(float(y)), phi.deriv(float(y)),
                     float(resid)))
    timings["check_hjb"] = time.perf_counter() - t0

    lines = ["y,phi,dphi,residual"]
    lines += [",".join(repr(v) for v in row) for row in rows]
    _atomic_write(os.path.join(out_dir, "hjb_check.csv"),
                  "\n".join(lines) + "\n")

    status = "PASS" if report.passed else "FAIL"
    print(f"check-hjb: {status}  phi_min {report.phi_min:.3e}  "
          f"deriv in [{report.deriv_min:.6f}, {report.deriv_max:.6f}]  "
          f"generator_max {report.generator_max:.3e}")
    return (EXIT_OK if report.passed else EXIT_FEASIBILITY), ["hjb_check.csv"]


def _cmd_moments(cfg: RunConfig, out_dir: str,
                 timings: Dict[str, float]) -> Tuple[int, List[str]]:
    occ_path = os.path.join(out_dir, "occupation.json")
    if os.path.exists(occ_path):
        with open(occ_path, "r") as fh:
            occ = system_from_json(fh.read())
    else:
        bundle = _latest_bundle(out_dir)
        if bundle is None:
            raise ModelError(
                f"no occupation.json or iteration_*.json under {out_dir}; "
                "run simulate or ddp first")
        occ = system_from_json(json.dumps(bundle["occupation"]))

    r = cfg.ddp.r
    t0 = time.perf_counter()
    put = putinar_check(occ, cfg.model, cfg.bounds, r=r,
                        psd_tol=cfg.ddp.psd_tol)
    measures = {}
    for name in ("gamma0", "gamma1", "gamma2", "gamma3"):
        measure = getattr(occ, name)
        mv = moments_from_atoms(measure, r, measure.labels, source=name)
        measures[name] = json.loads(mv.to_json())
    timings["moments"] = time.perf_counter() - t0

    doc = {
        "r": r,
        "putinar": {"passed": put.passed, "psd_tol": put.psd_tol,
                    "min_eigenvalues": dict(put.eigenvalues)},
        "measures": measures,
    }
    _atomic_write(os.path.join(out_dir, "moments.json"),
                  json.dumps(doc, indent=1, sort_keys=True))

    worst = min(put.eigenvalues.values()) if put.eigenvalues else 0.0
    print(f"moments: putinar {'PASS' if put.passed else 'FAIL'} at r={r}, "
          f"smallest localizing eigenvalue {worst:.3e}")
    return (EXIT_OK if put.passed else EXIT_FEASIBILITY), ["moments.json"]


_COMMANDS = {
    "simulate": _cmd_simulate,
    "ddp": _cmd_ddp,
    "check-hjb": _cmd_check_hjb,
    "moments": _cmd_moments,
}


def run_experiment(cfg: RunConfig, subcommand: str) -> int:
    """Execute one subcommand against a validated config; returns exit code."""
    if subcommand not in _COMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    out_dir = cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    timings: Dict[str, float] = {}
    start = time.perf_counter()
    error: Optional[str] = None
    artifacts: List[str] = []
    try:
        code, artifacts = _COMMANDS[subcommand](cfg, out_dir, timings)
    except DdpError as exc:
        error = str(exc)
        code = EXIT_FEASIBILITY if "feasib" in error.lower() else EXIT_SOLVER
        if exc.logs:
            artifacts.append("iterations.csv")
        print(f"error: {error}", file=sys.stderr)
    except ModelError as exc:
        error = str(exc)
        code = EXIT_MODEL
        print(f"error: {error}", file=sys.stderr)
    timings["total"] = time.perf_counter() - start
    _write_manifest(out_dir, subcommand, cfg, timings,
                    artifacts + ["manifest.json"], error=error)
    return code


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    try:
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError(f"--seed: must be in [0, 2^64), "
                                  f"got {args.seed}")
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = dataclasses.replace(cfg, out_dir=args.out)
        ddp = cfg.ddp
        if args.paths is not None:
            ddp = dataclasses.replace(ddp, n_paths=args.paths)
        if args.order is not None:
            ddp = dataclasses.replace(ddp, r=args.order)
        if args.tol is not None:
            ddp = dataclasses.replace(ddp, tol=args.tol)
        if ddp is not cfg.ddp:
            cfg = dataclasses.replace(cfg, ddp=ddp)
    except ModelError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="reinsddp",
        description="Reinsurance/dividend control bounds: simulation lower "
                    "bounds and certified polynomial upper bounds.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "Monte Carlo the configured strategy, write runs.csv "
                    "and occupation.json",
        "ddp": "run the bound iteration, write iterations.csv and "
               "per-iteration bundles",
        "check-hjb": "re-certify the latest saved value bound on a dense grid",
        "moments": "moment matrices and localizing checks of a saved "
                   "occupation system",
    }
    for name in _COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, help="TOML run file")
        p.add_argument("--seed", type=int, default=None,
                       help="override run.seed")
        p.add_argument("--out", default=None, help="override run.out")
        p.add_argument("--paths", type=int, default=None,
                       help="override ddp.n_paths")
        p.add_argument("--order", type=int, default=None,
                       help="override ddp.r (moment/certificate order)")
        p.add_argument("--tol", type=float, default=None,
                       help="override ddp.tol (stopping gap)")
    args = parser.parse_args(argv)

    try:
        cfg = parse_config(args.config)
        cfg = _apply_overrides(cfg, args)
        _workers()  # fail fast on a bad environment setting
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE

    try:
        return run_experiment(cfg, args.command)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
