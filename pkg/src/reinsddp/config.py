"""Run configuration: TOML parsing, validation, and round-trip serialization.

A run file has five sections::

    [model]    claims, premium, rates        (see below)
    [bounds]   xbar, horizon, eps
    [ddp]      engine knobs incl. the stage length t1
    [strategy] optional concrete strategy for the simulate subcommand
    [run]      x0, out, seed

Every invariant of the underlying objects is checked at parse time and
reported with the section.key that caused it, so a bad file fails before any
work starts.
"""
from __future__ import annotations

import dataclasses
import math
from typing import Mapping, Optional, Tuple

try:
    import tomllib as tomli
except ModuleNotFoundError:      # Python 3.10
    import tomli

from .ddp import DdpConfig
from .models import (
    ClaimLaw,
    ModelError,
    RiskModel,
    SpaceBounds,
    space_bounds,
)
from .simulate import StrategySpec
from .generator import RetentionFamily


class ConfigError(ValueError):
    """Malformed or invariant-violating run configuration."""


_MAX_SEED = 2 ** 64


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Fully validated description of one experiment."""

    model: RiskModel
    bounds: SpaceBounds
    ddp: DdpConfig
    strategy: StrategySpec
    t1: float
    x0: float
    out_dir: str
    seed: int


def _section(doc: Mapping, name: str) -> Mapping:
    try:
        sec = doc[name]
    except KeyError:
        raise ConfigError(f"missing [{name}] section") from None
    if not isinstance(sec, Mapping):
        raise ConfigError(f"[{name}] must be a table")
    return sec


def _need(sec: Mapping, where: str, key: str):
    try:
        return sec[key]
    except KeyError:
        raise ConfigError(f"{where}.{key}: required key is missing") from None


def _number(sec: Mapping, where: str, key: str, default=None) -> float:
    val = sec.get(key, default)
    if val is None:
        raise ConfigError(f"{where}.{key}: required key is missing")
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{where}.{key}: expected a number, got {val!r}")
    return float(val)


def _claims_from(sec: Mapping) -> ClaimLaw:
    kind = sec.get("claims")
    try:
        if kind == "exponential":
            return ClaimLaw.exponential(_number(sec, "model", "rate"))
        if kind == "empirical":
            atoms = sec.get("atoms")
            if not isinstance(atoms, list) or not atoms:
                raise ConfigError("model.atoms: empirical claims need a list "
                                  "of [value, weight] pairs")
            try:
                pairs = [(float(v), float(w)) for v, w in atoms]
            except (TypeError, ValueError):
                raise ConfigError("model.atoms: entries must be "
                                  "[value, weight] pairs") from None
            return ClaimLaw.empirical(pairs)
    except ModelError as exc:
        raise ConfigError(f"model.claims: {exc}") from None
    raise ConfigError(
        f"model.claims: must be 'exponential' or 'empirical', got {kind!r}")


def _premium_from(sec: Mapping) -> dict:
    rows = sec.get("premium")
    if not isinstance(rows, list) or not rows:
        raise ConfigError("model.premium: need a list of [a, b, coeff] rows")
    out = {}
    for row in rows:
        if not isinstance(row, list) or len(row) != 3:
            raise ConfigError(f"model.premium: row {row!r} is not [a, b, coeff]")
        a, b, c = row
        if isinstance(a, bool) or isinstance(b, bool) or \
                not isinstance(a, int) or not isinstance(b, int):
            raise ConfigError(f"model.premium: exponents in {row!r} must be "
                              "integers")
        out[(a, b)] = float(c)
    return out


_DDP_KEYS = {
    "t1", "r", "eps", "n_paths", "forward_grid", "backward_points",
    "backward_retentions", "max_iter", "tol", "method", "retention_kind",
    "ladder_depth", "occupation_grid", "h", "lb_paths", "adjoint_mult",
    "psd_tol",
}


def _ddp_from(sec: Mapping) -> Tuple[DdpConfig, float]:
    unknown = set(sec) - _DDP_KEYS
    if unknown:
        raise ConfigError(f"ddp.{sorted(unknown)[0]}: unknown key")
    t1 = _number(sec, "ddp", "t1")
    kwargs = {}
    for key in ("r", "n_paths", "backward_points", "backward_retentions",
                "max_iter", "ladder_depth", "lb_paths"):
        if key in sec:
            val = sec[key]
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigError(f"ddp.{key}: expected an integer")
            kwargs[key] = val
    for key in ("eps", "tol", "h", "adjoint_mult", "psd_tol"):
        if key in sec:
            kwargs[key] = _number(sec, "ddp", key)
    for key in ("method", "retention_kind"):
        if key in sec:
            if not isinstance(sec[key], str):
                raise ConfigError(f"ddp.{key}: expected a string")
            kwargs[key] = sec[key]
    for key in ("forward_grid", "occupation_grid"):
        if key in sec:
            val = sec[key]
            if not isinstance(val, list) or \
                    any(isinstance(g, bool) or not isinstance(g, int) for g in val):
                raise ConfigError(f"ddp.{key}: expected a list of integers")
            kwargs[key] = tuple(val)
    try:
        cfg = DdpConfig(**kwargs)
    except ModelError as exc:
        raise ConfigError(f"ddp: {exc}") from None
    if not (t1 > 0 and math.isfinite(t1)):
        raise ConfigError(f"ddp.t1: stage length must be positive and finite, "
                          f"got {t1}")
    return cfg, t1


def _strategy_from(sec: Optional[Mapping], model: RiskModel) -> StrategySpec:
    if sec is None:
        return StrategySpec.pay_everything()
    kind = sec.get("kind", "full")
    if kind not in ("proportional", "excess_of_loss", "full"):
        raise ConfigError(f"strategy.kind: unknown retention kind {kind!r}")
    param = _number(sec, "strategy", "param", default=1.0)
    try:
        retention = RetentionFamily(kind).policy(param)
        return StrategySpec(
            retention=retention,
            injection_floor=_number(sec, "strategy", "injection_floor", 0.0),
            dividend_barrier=_number(sec, "strategy", "dividend_barrier",
                                     default=math.inf),
            initial_dividend=_number(sec, "strategy", "initial_dividend", 0.0),
            initial_injection=_number(sec, "strategy", "initial_injection", 0.0),
        )
    except ModelError as exc:
        raise ConfigError(f"strategy: {exc}") from None


def config_from_doc(doc: Mapping) -> RunConfig:
    """Build and validate a RunConfig from a parsed (TOML-shaped) mapping."""
    msec = _section(doc, "model")
    claims = _claims_from(msec)
    premium = _premium_from(msec)
    penalty = None
    if "penalty" in msec:
        pen = msec["penalty"]
        if not isinstance(pen, list) or len(pen) != 2:
            raise ConfigError("model.penalty: expected [a, b]")
        penalty = (float(pen[0]), float(pen[1]))
    try:
        model = RiskModel.build(
            claims, premium,
            lam=_number(msec, "model", "lam"),
            q=_number(msec, "model", "q"),
            k=_number(msec, "model", "k"),
            penalty=penalty,
        )
    except ModelError as exc:
        raise ConfigError(f"model: {exc}") from None

    bsec = _section(doc, "bounds")
    try:
        bounds = space_bounds(model,
                              xbar=_number(bsec, "bounds", "xbar"),
                              T=_number(bsec, "bounds", "horizon"),
                              eps=_number(bsec, "bounds", "eps"))
    except ModelError as exc:
        raise ConfigError(f"bounds: {exc}") from None

    ddp_cfg, t1 = _ddp_from(_section(doc, "ddp"))
    if t1 * ddp_cfg.ladder_depth > bounds.horizon + 1e-9:
        raise ConfigError(
            f"ddp.t1: ladder t1 * ladder_depth = "
            f"{t1 * ddp_cfg.ladder_depth} exceeds bounds.horizon "
            f"= {bounds.horizon}")

    rsec = _section(doc, "run")
    x0 = _number(rsec, "run", "x0")
    if not math.isfinite(x0):
        raise ConfigError(f"run.x0: must be finite, got {x0}")
    out_dir = rsec.get("out", "runs")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("run.out: expected a nonempty path string")
    seed = rsec.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or \
            not 0 <= seed < _MAX_SEED:
        raise ConfigError(f"run.seed: must be an integer in [0, 2^64), "
                          f"got {seed!r}")

    strategy = _strategy_from(doc.get("strategy"), model)
    return RunConfig(model=model, bounds=bounds, ddp=ddp_cfg,
                     strategy=strategy, t1=t1, x0=x0, out_dir=out_dir,
                     seed=seed)


def parse_config(path: str) -> RunConfig:
    """Read, parse, and validate a TOML run file."""
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_doc(doc)


def config_to_doc(cfg: RunConfig) -> dict:
    """Canonical plain-dict form of a RunConfig; inverse of config_from_doc."""
    model = cfg.model
    msec = {"claims": model.claims.kind}
    if model.claims.kind == "exponential":
        msec["rate"] = model.claims.rate
    else:
        msec["atoms"] = [[v, w] for v, w in model.claims.atoms]
    msec["premium"] = [[a, b, c] for (a, b), c in model.premium.coefficients]
    msec.update(lam=model.lam, q=model.q, k=model.k)
    if model.penalty is not None:
        msec["penalty"] = [model.penalty[0], model.penalty[1]]

    d = cfg.ddp
    dsec = {
        "t1": cfg.t1, "r": d.r, "eps": d.eps, "n_paths": d.n_paths,
        "forward_grid": list(d.forward_grid),
        "backward_points": d.backward_points,
        "backward_retentions": d.backward_retentions,
        "max_iter": d.max_iter, "tol": d.tol, "method": d.method,
        "retention_kind": d.retention_kind, "ladder_depth": d.ladder_depth,
        "occupation_grid": list(d.occupation_grid),
        "adjoint_mult": d.adjoint_mult, "psd_tol": d.psd_tol,
    }
    if d.h is not None:
        dsec["h"] = d.h
    if d.lb_paths is not None:
        dsec["lb_paths"] = d.lb_paths

    s = cfg.strategy
    ssec = {"kind": s.retention.kind, "param": s.retention.param,
            "injection_floor": s.injection_floor,
            "dividend_barrier": s.dividend_barrier,
            "initial_dividend": s.initial_dividend,
            "initial_injection": s.initial_injection}

    return {
        "model": msec,
        "bounds": {"xbar": cfg.bounds.xbar, "horizon": cfg.bounds.horizon,
                   "eps": cfg.bounds.eps},
        "ddp": dsec,
        "strategy": ssec,
        "run": {"x0": cfg.x0, "out": cfg.out_dir, "seed": cfg.seed},
    }
