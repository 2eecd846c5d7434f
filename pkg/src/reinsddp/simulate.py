"""Forward simulation of the controlled surplus process.

Between claims the reserve follows the affine flow dX = (level + slope*X) dt,
where (level, slope) are the coefficients of the claim-integrated premium
(reserve degree <= 1 is enforced at model build).  The flow, the first hitting
time of the dividend barrier, and the discounted dividend stream while clamped
at the barrier all have closed forms, so paths are advanced event-to-event
with no time-stepping error: the only randomness is the claim stream.

Each path draws its claims from its own PCG64 generator, spawned from the
master seed with ``SeedSequence.spawn``; path *i* therefore sees the same
claims no matter how large the batch is, which makes gain estimates stable
under batch-size changes and makes paired comparisons (same seed, perturbed
start) exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .models import (
    ClaimLaw,
    ModelError,
    RetentionPolicy,
    RiskModel,
    premium_transform_coeffs,
)

__all__ = [
    "StrategySpec",
    "DriftStretch",
    "PathEvent",
    "TrajectoryRecord",
    "GainEstimate",
    "drift_coefficients",
    "affine_flow",
    "barrier_hit_time",
    "simulate_ensemble",
    "simulate_path",
    "estimate_gain",
    "reserve_at",
]

SeedLike = Union[int, np.random.SeedSequence]


# ---------------------------------------------------------------------------
# strategy description


@dataclass(frozen=True)
class StrategySpec:
    """Stationary barrier strategy: retention + injection floor + dividend barrier.

    Dividends reflect the reserve at ``dividend_barrier`` (paying the premium
    inflow out while clamped, plus an immediate lump for any initial excess).
    After a claim the reserve is refilled to zero whenever the deficit is at
    most ``injection_floor``; a deeper deficit declares ruin.  At most one of
    the two optional time-zero lumps may be positive.
    """

    retention: RetentionPolicy
    injection_floor: float = 0.0
    dividend_barrier: float = math.inf
    initial_dividend: float = 0.0
    initial_injection: float = 0.0

    def __post_init__(self) -> None:
        if not isinstance(self.retention, RetentionPolicy):
            raise ModelError("retention must be a RetentionPolicy")
        if math.isnan(self.injection_floor) or self.injection_floor < 0:
            raise ModelError("injection_floor must be >= 0")
        if math.isnan(self.dividend_barrier) or self.dividend_barrier < 0:
            raise ModelError("dividend_barrier must be >= 0 (inf for no dividends)")
        for name in ("initial_dividend", "initial_injection"):
            v = getattr(self, name)
            if math.isnan(v) or math.isinf(v) or v < 0:
                raise ModelError(f"{name} must be finite and >= 0")
        if self.initial_dividend > 0 and self.initial_injection > 0:
            raise ModelError("at most one time-zero lump may be positive")

    @staticmethod
    def pay_everything() -> "StrategySpec":
        """Full retention, no refills, barrier at zero: pay out all surplus."""
        return StrategySpec(RetentionPolicy.full(), 0.0, 0.0)


# ---------------------------------------------------------------------------
# closed-form affine flow helpers


def drift_coefficients(model: RiskModel, retention: RetentionPolicy) -> Tuple[float, float]:
    """(level, slope) of the claim-integrated premium  p_u(x) = level + slope*x."""
    coeffs = premium_transform_coeffs(model, retention)
    level = float(coeffs[0])
    slope = float(coeffs[1]) if coeffs.size > 1 else 0.0
    return level, slope


def affine_flow(x: float, level: float, slope: float, dt: float) -> float:
    """Reserve after time ``dt`` of undisturbed drift dX = (level + slope*X) dt."""
    z = slope * dt
    if z == 0.0:
        return x + level * dt
    return x + (level + slope * x) * dt * (math.expm1(z) / z)


def barrier_hit_time(x: float, level: float, slope: float, target: float) -> float:
    """First time the affine flow started at ``x`` reaches ``target`` from below.

    Returns ``0.0`` when already at or above the target and ``inf`` when the
    flow never gets there (non-positive speed, or an equilibrium in between).
    """
    if target <= x:
        return 0.0
    speed = level + slope * x
    if speed <= 0.0:
        return math.inf
    if slope == 0.0:
        return (target - x) / speed
    w = slope * (target - x) / speed
    if w <= -1.0:
        return math.inf
    if abs(w) < 1e-16:
        # curvature below float precision (possibly denormal): linear limit
        return (target - x) / speed
    return math.log1p(w) / slope


# ---------------------------------------------------------------------------
# per-path records


@dataclass(frozen=True, slots=True)
class DriftStretch:
    """Maximal interval of uninterrupted drift.

    ``clamped`` stretches sit at the dividend barrier (reserve constant at
    ``x_start``); free stretches follow the affine flow from ``x_start`` and
    can be re-evaluated exactly at any interior time via :func:`reserve_at`.
    """

    t_from: float
    t_to: float
    x_start: float
    clamped: bool


@dataclass(frozen=True, slots=True)
class PathEvent:
    """Instantaneous transition: kind in {dividend, injection, claim, ruin, horizon}.

    ``amount`` is the lump size (the retained claim for kind "claim", the
    deficit for kind "ruin").  Reserves are recorded immediately before and
    after the jump; for an injection the jump ends at zero.
    """

    t: float
    kind: str
    amount: float
    x_before: float
    x_after: float


@dataclass(frozen=True, slots=True)
class TrajectoryRecord:
    """One simulated path, with enough structure to rebuild it exactly."""

    x0: float
    horizon: float
    terminal_time: float
    terminal_reserve: float
    ruined: bool
    dividends_disc: float
    injections_disc: float
    penalty_disc: float
    gain: float
    stretches: Tuple[DriftStretch, ...]
    events: Tuple[PathEvent, ...]


@dataclass(frozen=True)
class GainEstimate:
    """Monte-Carlo mean of the discounted gain with its standard error."""

    mean: float
    std_error: float
    n_paths: int


# ---------------------------------------------------------------------------
# engine


def _claim_sampler(claims: ClaimLaw) -> Callable[[np.random.Generator], float]:
    if claims.kind == "exponential":
        scale = 1.0 / claims.rate
        return lambda gen: gen.exponential(scale)
    values = np.array([v for v, _ in claims.atoms], dtype=float)
    cum = np.cumsum(np.array([w for _, w in claims.atoms], dtype=float))
    cum[-1] = 1.0
    top = len(values) - 1

    def draw(gen: np.random.Generator) -> float:
        idx = int(np.searchsorted(cum, gen.random(), side="right"))
        return float(values[min(idx, top)])

    return draw


def _retained_fn(policy: RetentionPolicy) -> Callable[[float], float]:
    if policy.kind == "proportional":
        theta = policy.param
        return lambda c: theta * c
    if policy.kind == "excess_of_loss":
        cap = policy.param
        return lambda c: c if c < cap else cap
    return lambda c: c


class _Engine:
    """Shared per-strategy state for the event-driven path kernel."""

    __slots__ = (
        "strategy", "level", "slope", "retained", "draw_claim", "q", "k",
        "lam_scale", "barrier", "p_barrier", "clampable", "pen_a", "pen_b",
        "has_penalty",
    )

    def __init__(self, model: RiskModel, strategy: StrategySpec):
        self.strategy = strategy
        self.level, self.slope = drift_coefficients(model, strategy.retention)
        self.retained = _retained_fn(strategy.retention)
        self.draw_claim = _claim_sampler(model.claims)
        self.q = model.q
        self.k = model.k
        self.lam_scale = 1.0 / model.lam
        b = strategy.dividend_barrier
        self.barrier = b
        if math.isfinite(b):
            self.p_barrier = self.level + self.slope * b
        else:
            self.p_barrier = 0.0
        # Reflection only makes sense while the premium pushes upward at the
        # barrier; otherwise the reserve leaves downward on its own.
        self.clampable = math.isfinite(b) and self.p_barrier >= 0.0
        if model.penalty is None:
            self.has_penalty = False
            self.pen_a = self.pen_b = 0.0
        else:
            self.has_penalty = True
            self.pen_a, self.pen_b = model.penalty

    def run(self, gen: np.random.Generator, x0: float, horizon: float,
            record: bool) -> TrajectoryRecord:
        q = self.q
        level = self.level
        slope = self.slope
        barrier = self.barrier
        p_barrier = self.p_barrier
        clampable = self.clampable
        retained = self.retained
        draw_claim = self.draw_claim
        lam_scale = self.lam_scale
        strat = self.strategy
        exp = math.exp

        events: List[PathEvent] = []
        stretches: List[DriftStretch] = []
        t = 0.0
        x = float(x0)
        div = 0.0
        inj = 0.0
        pen = 0.0

        if strat.initial_injection > 0.0:
            x_pre = x
            x += strat.initial_injection
            inj += strat.initial_injection
            if record:
                events.append(PathEvent(0.0, "injection", strat.initial_injection, x_pre, x))
        if strat.initial_dividend > 0.0:
            if strat.initial_dividend > x + 1e-12:
                raise ModelError(
                    f"initial dividend {strat.initial_dividend} exceeds starting reserve {x}"
                )
            x_pre = x
            x -= strat.initial_dividend
            div += strat.initial_dividend
            if record:
                events.append(PathEvent(0.0, "dividend", strat.initial_dividend, x_pre, x))
        if math.isfinite(barrier) and x > barrier:
            x_pre = x
            div += x - barrier
            if record:
                events.append(PathEvent(0.0, "dividend", x - barrier, x_pre, barrier))
            x = barrier

        tau = gen.exponential(lam_scale)
        ruined = False
        s1 = horizon
        y1 = x
        while True:
            e = tau if tau < horizon else horizon
            if e > t:
                if clampable and x >= barrier:
                    div += p_barrier * (exp(-q * t) - exp(-q * e)) / q
                    if record:
                        stretches.append(DriftStretch(t, e, barrier, True))
                    x = barrier
                else:
                    th = math.inf
                    if clampable:
                        th = t + barrier_hit_time(x, level, slope, barrier)
                    if th < e:
                        if record and th > t:
                            stretches.append(DriftStretch(t, th, x, False))
                        div += p_barrier * (exp(-q * th) - exp(-q * e)) / q
                        if record:
                            stretches.append(DriftStretch(th, e, barrier, True))
                        x = barrier
                    else:
                        if record:
                            stretches.append(DriftStretch(t, e, x, False))
                        x = affine_flow(x, level, slope, e - t)
                        if clampable and x > barrier:
                            x = barrier
            t = e
            if tau >= horizon:
                s1 = horizon
                y1 = x
                if record:
                    events.append(PathEvent(t, "horizon", 0.0, x, x))
                break
            c = draw_claim(gen)
            r = retained(c)
            x_pre = x
            x = x - r
            if record:
                events.append(PathEvent(t, "claim", r, x_pre, x))
            if x < 0.0:
                if x >= -strat.injection_floor:
                    amt = -x
                    inj += amt * exp(-q * t)
                    if record:
                        events.append(PathEvent(t, "injection", amt, x, 0.0))
                    x = 0.0
                else:
                    ruined = True
                    s1 = t
                    y1 = x
                    if self.has_penalty:
                        pen += exp(-q * t) * (self.pen_b * x - self.pen_a)
                    if record:
                        events.append(PathEvent(t, "ruin", -x, x, x))
                    break
            tau = t + gen.exponential(lam_scale)

        gain = div - self.k * inj + pen
        return TrajectoryRecord(
            x0=float(x0), horizon=horizon, terminal_time=s1, terminal_reserve=y1,
            ruined=ruined, dividends_disc=div, injections_disc=inj,
            penalty_disc=pen, gain=gain,
            stretches=tuple(stretches), events=tuple(events),
        )


# ---------------------------------------------------------------------------
# public entry points


def _seed_sequence(seed: SeedLike) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def simulate_ensemble(model: RiskModel, strategy: StrategySpec, x0: float,
                      horizon: float, n_paths: int, seed: SeedLike,
                      record: bool = False) -> List[TrajectoryRecord]:
    """Simulate ``n_paths`` independent paths; with ``record`` keep full structure.

    Without ``record`` the returned records still carry the terminal state and
    the discounted gain components, just no stretches/events.
    """
    if n_paths < 1:
        raise ModelError("n_paths must be >= 1")
    if not horizon >= 0 or not math.isfinite(horizon):
        raise ModelError("horizon must be nonnegative and finite")
    engine = _Engine(model, strategy)
    out = []
    for child in _seed_sequence(seed).spawn(n_paths):
        gen = np.random.Generator(np.random.PCG64(child))
        out.append(engine.run(gen, x0, horizon, record))
    return out


def simulate_path(model: RiskModel, strategy: StrategySpec, x0: float,
                  horizon: float, seed: SeedLike) -> TrajectoryRecord:
    """Single fully recorded path (stream identical to path 0 of an ensemble)."""
    return simulate_ensemble(model, strategy, x0, horizon, 1, seed, record=True)[0]


def estimate_gain(model: RiskModel, strategy: StrategySpec, x0: float,
                  horizon: float, n_paths: int, seed: SeedLike) -> GainEstimate:
    """Monte-Carlo estimate of the expected discounted gain.

    The standard error is NaN when ``n_paths`` is too small to estimate a
    sample variance.
    """
    recs = simulate_ensemble(model, strategy, x0, horizon, n_paths, seed)
    gains = np.fromiter((r.gain for r in recs), dtype=float, count=n_paths)
    mean = float(gains.mean())
    if n_paths >= 2:
        se = float(gains.std(ddof=1) / math.sqrt(n_paths))
    else:
        se = math.nan
    return GainEstimate(mean=mean, std_error=se, n_paths=n_paths)


def reserve_at(record: TrajectoryRecord, model: RiskModel, strategy: StrategySpec,
               times: Sequence[float]) -> np.ndarray:
    """Evaluate the recorded path's reserve at arbitrary times in [0, terminal].

    Uses the exact affine flow on free stretches, so this agrees with the
    engine to machine precision.  Requires a record produced with
    ``record=True``.
    """
    if not record.stretches:
        raise ModelError("record has no stretches; simulate with record=True")
    level, slope = drift_coefficients(model, strategy.retention)
    starts = np.array([s.t_from for s in record.stretches])
    out = np.empty(len(times), dtype=float)
    for j, s in enumerate(times):
        if s < 0 or s > record.terminal_time + 1e-12:
            raise ModelError(f"time {s} outside [0, {record.terminal_time}]")
        idx = int(np.searchsorted(starts, s, side="right")) - 1
        idx = max(idx, 0)
        st = record.stretches[idx]
        if st.clamped:
            out[j] = st.x_start
        else:
            out[j] = affine_flow(st.x_start, level, slope, min(s, st.t_to) - st.t_from)
    return out
