"""Integro-differential generator, Hamiltonian, and dual-feasibility checks.

The generator of the uncontrolled-between-claims surplus under retention u is

    L_u phi(y) = p_u(y) phi'(y) + lam * E[phi(y - u(C))] - (lam + q) phi(y),

which maps polynomials to polynomials through the closed-form retained power
means, so everything here is exact coefficient algebra (numpy ascending-power
convention) — no quadrature.

A candidate dual function phi is *feasible* when phi >= 0 on the reserve box,
phi' sits in [1, k] (with the configured slack) where required, and
L_u phi <= 0 for every retention in the family.  Feasibility is certified on
dense grids; `check_dual_feasibility` also knows the constant-shift repair
L_u(phi + c) = L_u(phi) - q c for candidates that only miss the generator
constraint by a small margin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial import polynomial as P

from .models import (
    ModelError,
    RetentionPolicy,
    RiskModel,
    SpaceBounds,
    premium_transform_coeffs,
    retained_claim_moment_coeffs,
)

__all__ = [
    "PolyValueFn",
    "FeasibilityReport",
    "RetentionFamily",
    "generator_on_monomial",
    "generator_apply",
    "hamiltonian",
    "hjb_residual",
    "check_dual_feasibility",
    "shift_constant",
]

HAMILTONIAN_GRID = 129
CHECK_GRID = 1025
REFINE_TOL = 1e-6


# ---------------------------------------------------------------------------
# retention families


@dataclass(frozen=True)
class RetentionFamily:
    """Parametric family the controller optimizes over.

    kind "proportional": u(c) = theta*c with theta in [low, 1].
    kind "excess_of_loss": u(c) = min(c, cap) with cap in (0, claim quantile],
    discretized on a log grid (plus the cap-0 boundary point).
    kind "full": the singleton u(c) = c.
    """

    kind: str
    low: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("proportional", "excess_of_loss", "full"):
            raise ModelError(f"unknown retention family {self.kind!r}")
        if self.kind == "proportional" and not 0.0 <= self.low < 1.0:
            raise ModelError("proportional family needs 0 <= low < 1")
        if self.kind == "excess_of_loss" and self.low < 0.0:
            raise ModelError("excess-of-loss family needs low >= 0")

    def grid(self, model: RiskModel, n: int = HAMILTONIAN_GRID) -> Tuple[RetentionPolicy, ...]:
        if n < 1:
            raise ModelError("retention grid needs at least one point")
        if self.kind == "full":
            return (RetentionPolicy.full(),)
        if self.kind == "proportional":
            thetas = np.linspace(self.low, 1.0, n)
            return tuple(RetentionPolicy.proportional(float(t)) for t in thetas)
        hi = model.claims.box_high
        lo = max(self.low, hi * 1e-3)
        caps = np.concatenate([[0.0], np.geomspace(lo, hi, n - 1)]) if n > 1 else np.array([hi])
        return tuple(RetentionPolicy.excess_of_loss(float(c)) for c in caps)

    def policy(self, param: float) -> RetentionPolicy:
        if self.kind == "full":
            return RetentionPolicy.full()
        if self.kind == "proportional":
            return RetentionPolicy.proportional(param)
        return RetentionPolicy.excess_of_loss(param)

    def param_bounds(self, model: RiskModel) -> Tuple[float, float]:
        if self.kind == "full":
            return (1.0, 1.0)
        if self.kind == "proportional":
            return (self.low, 1.0)
        return (0.0, model.claims.box_high)


def _as_policies(model: RiskModel, retentions, n: int = HAMILTONIAN_GRID
                 ) -> Tuple[RetentionPolicy, ...]:
    if retentions is None:
        retentions = RetentionFamily("proportional")
    if isinstance(retentions, RetentionFamily):
        return retentions.grid(model, n)
    if isinstance(retentions, RetentionPolicy):
        return (retentions,)
    pols = tuple(retentions)
    if not pols:
        raise ModelError("retention grid is empty")
    return pols


# ---------------------------------------------------------------------------
# dual candidates


@dataclass(frozen=True)
class FeasibilityReport:
    """Grid-check record for one dual candidate."""

    passed: bool
    eps: float
    phi_min: float
    phi_min_at: float
    deriv_min: float
    deriv_min_at: float
    deriv_max: float
    deriv_max_at: float
    generator_max: float
    generator_max_at: Tuple[float, float]  # (reserve, retention parameter)
    tol: float
    shift_applied: float = 0.0
    passed_after_shift: Optional[bool] = None


@dataclass(frozen=True)
class PolyValueFn:
    """Polynomial dual candidate phi(y) = sum_beta C_beta y^beta, degree <= 2r."""

    coeffs: Tuple[float, ...]
    r: int
    eps_slack: float = 0.0
    certificate: Optional[FeasibilityReport] = None

    def __post_init__(self) -> None:
        if len(self.coeffs) == 0:
            raise ModelError("empty coefficient list")
        if self.r < 1:
            raise ModelError("relaxation order r must be >= 1")
        if len(self.coeffs) - 1 > 2 * self.r:
            raise ModelError(
                f"degree {len(self.coeffs) - 1} exceeds 2r = {2 * self.r}"
            )
        if self.eps_slack < 0:
            raise ModelError("eps_slack must be >= 0")

    @staticmethod
    def from_coeffs(coeffs: Sequence[float], r: int, eps_slack: float = 0.0,
                    certificate: Optional[FeasibilityReport] = None) -> "PolyValueFn":
        arr = np.asarray(coeffs, dtype=float)
        if arr.ndim != 1:
            raise ModelError("coefficients must be one-dimensional")
        return PolyValueFn(tuple(float(c) for c in arr), r, eps_slack, certificate)

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def as_array(self) -> np.ndarray:
        return np.array(self.coeffs, dtype=float)

    def deriv_array(self) -> np.ndarray:
        return P.polyder(self.as_array())

    def __call__(self, y):
        val = P.polyval(np.asarray(y, dtype=float), self.as_array())
        return float(val) if np.ndim(y) == 0 else val

    def deriv(self, y):
        val = P.polyval(np.asarray(y, dtype=float), self.deriv_array())
        return float(val) if np.ndim(y) == 0 else val

    def shifted(self, c: float) -> "PolyValueFn":
        coeffs = list(self.coeffs)
        coeffs[0] += c
        return PolyValueFn(tuple(coeffs), self.r, self.eps_slack, None)


# ---------------------------------------------------------------------------
# generator algebra


def generator_on_monomial(model: RiskModel, u: RetentionPolicy, alpha: int) -> np.ndarray:
    """Coefficients (ascending) of L_u applied to y^alpha."""
    if alpha < 0:
        raise ModelError("monomial degree must be nonnegative")
    jump = model.lam * retained_claim_moment_coeffs(model, u, alpha)
    if alpha == 0:
        out = jump.copy()
    else:
        pu = premium_transform_coeffs(model, u)
        drift = np.zeros(alpha + len(pu))
        drift[alpha - 1: alpha - 1 + len(pu)] = alpha * pu
        n = max(len(drift), len(jump))
        out = np.zeros(n)
        out[: len(drift)] += drift
        out[: len(jump)] += jump
    if len(out) <= alpha:
        out = np.concatenate([out, np.zeros(alpha + 1 - len(out))])
    out[alpha] -= model.lam + model.q
    return out


def generator_apply(model: RiskModel, u: RetentionPolicy,
                    phi: Union[PolyValueFn, Sequence[float]]) -> np.ndarray:
    """Coefficients (ascending) of L_u phi for a polynomial phi."""
    coeffs = phi.as_array() if isinstance(phi, PolyValueFn) else np.asarray(phi, dtype=float)
    terms = [c * generator_on_monomial(model, u, a)
             for a, c in enumerate(coeffs) if c != 0.0]
    if not terms:
        return np.zeros(1)
    n = max(len(t) for t in terms)
    out = np.zeros(n)
    for t in terms:
        out[: len(t)] += t
    return out


def _generator_value(model: RiskModel, u: RetentionPolicy, phi: PolyValueFn, y: float) -> float:
    return float(P.polyval(y, generator_apply(model, u, phi)))


def _golden_refine(f, lo: float, hi: float, tol: float = REFINE_TOL) -> Tuple[float, float]:
    """Golden-section maximization of f on [lo, hi] to parameter tolerance tol."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    xm = 0.5 * (a + b)
    return xm, f(xm)


def hamiltonian(model: RiskModel, phi: PolyValueFn, y: float,
                retentions=None, n_grid: int = HAMILTONIAN_GRID,
                refine: bool = True) -> float:
    """sup over the retention family of L_u phi(y).

    Grid search over the family (129 points by default) followed by a
    golden-section polish of the continuous parameter around the best grid
    point, to parameter tolerance 1e-6.
    """
    family = retentions if isinstance(retentions, RetentionFamily) else None
    policies = _as_policies(model, retentions, n_grid)
    vals = [_generator_value(model, u, phi, y) for u in policies]
    best = int(np.argmax(vals))
    out = vals[best]
    if refine and family is not None and family.kind != "full" and len(policies) > 1:
        params = [u.param for u in policies]
        lo = params[max(best - 1, 0)]
        hi = params[min(best + 1, len(params) - 1)]
        if hi > lo:
            _, refined = _golden_refine(
                lambda th: _generator_value(model, family.policy(th), phi, y), lo, hi
            )
            out = max(out, refined)
    return out


def hjb_residual(model: RiskModel, phi: PolyValueFn, y: float,
                 retentions=None) -> Tuple[Optional[float], Optional[float]]:
    """Variational-inequality residual at y: (positive-axis, negative-axis).

    On y >= 0 the first slot holds max{1 - phi', phi' - k, H(y)} (a feasible
    supersolution keeps it <= 0); on y < 0 the second slot holds
    min{max{1 - phi', phi' - k}, phi(y)}.  The inactive slot is None.
    """
    d = phi.deriv(y)
    if y >= 0:
        h = hamiltonian(model, phi, y, retentions)
        return (max(1.0 - d, d - model.k, h), None)
    return (None, min(max(1.0 - d, d - model.k), phi(y)))


# ---------------------------------------------------------------------------
# dual feasibility on grids


def shift_constant(model: RiskModel, bounds: SpaceBounds) -> float:
    """A-priori bound on the constant shift that repairs a slack candidate.

    Any phi with the derivative bounds satisfied has |L_u phi| controlled by
    (lip1 + 2 lam + q) xmax + norm0 on the box, so adding that over q is
    always enough to restore L_u phi <= 0 via the shift lemma.
    """
    return ((model.premium.lip1 + 2.0 * model.lam + model.q) * bounds.xmax
            + model.premium.norm0) / model.q


def check_dual_feasibility(model: RiskModel, phi: PolyValueFn, bounds: SpaceBounds,
                           eps: Optional[float] = None, retentions=None,
                           n_y: int = CHECK_GRID, n_u: int = HAMILTONIAN_GRID,
                           tol: float = 1e-7) -> FeasibilityReport:
    """Dense grid check of dual-class membership.

    Checks phi >= 0 on [xmin, xmax], phi' >= 1 - eps on [0, xmax],
    phi' <= k + eps on [xmin, xmax], and L_u phi <= 0 on [0, xmax] for every
    retention on the family grid.  Numerical dust up to ``tol`` (scaled by the
    candidate's magnitude) is forgiven on the sign constraints.  When only the
    generator constraint fails, the constant-shift repair phi + delta/q is
    evaluated and recorded (L_u(phi + c) = L_u phi - q c).
    """
    if eps is None:
        eps = phi.eps_slack
    policies = _as_policies(model, retentions, n_u)
    y_full = np.linspace(bounds.xmin, bounds.xmax, n_y)
    y_pos = y_full[y_full >= 0.0]
    if y_pos.size == 0 or y_pos[0] > 0.0:
        y_pos = np.concatenate([[0.0], y_pos])

    arr = phi.as_array()
    darr = P.polyder(arr)
    phi_vals = P.polyval(y_full, arr)
    d_full = P.polyval(y_full, darr)
    d_pos = P.polyval(y_pos, darr)

    scale = 1.0 + float(np.max(np.abs(phi_vals)))
    dust = tol * scale

    i_phi = int(np.argmin(phi_vals))
    i_dmin = int(np.argmin(d_pos))
    i_dmax = int(np.argmax(d_full))

    gen_max = -math.inf
    gen_at = (math.nan, math.nan)
    for u in policies:
        gvals = P.polyval(y_pos, generator_apply(model, u, phi))
        j = int(np.argmax(gvals))
        if gvals[j] > gen_max:
            gen_max = float(gvals[j])
            gen_at = (float(y_pos[j]), float(u.param))

    phi_ok = phi_vals[i_phi] >= -dust
    dmin_ok = d_pos[i_dmin] >= 1.0 - eps - tol
    dmax_ok = d_full[i_dmax] <= model.k + eps + tol
    gen_ok = gen_max <= dust
    passed = bool(phi_ok and dmin_ok and dmax_ok and gen_ok)

    shift = 0.0
    passed_after = None
    if not gen_ok and phi_ok and dmin_ok and dmax_ok:
        # shift lemma: adding delta/q lowers the generator by exactly delta
        # (and can only help the nonnegativity constraint)
        shift = gen_max / model.q
        cand = phi.shifted(shift)
        sub = check_dual_feasibility(model, cand, bounds, eps, policies, n_y, n_u, tol)
        passed_after = sub.passed

    return FeasibilityReport(
        passed=passed, eps=eps,
        phi_min=float(phi_vals[i_phi]), phi_min_at=float(y_full[i_phi]),
        deriv_min=float(d_pos[i_dmin]), deriv_min_at=float(y_pos[i_dmin]),
        deriv_max=float(d_full[i_dmax]), deriv_max_at=float(y_full[i_dmax]),
        generator_max=gen_max, generator_max_at=gen_at,
        tol=tol, shift_applied=shift, passed_after_shift=passed_after,
    )
