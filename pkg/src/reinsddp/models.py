"""Risk-model primitives: claim laws, premium rules, retention policies, bounds.

The controlled surplus process earns premium at a reserve-dependent rate,
loses the retained part of each claim at Poisson epochs, and is steered by
dividend withdrawals (gain 1 per unit) and capital injections (cost ``k > 1``
per unit).  This module owns the static model data and the transforms that
every downstream component consumes:

* the premium rate under a retention policy,
  ``p_u(x) = integral p(u(c), x) F(dc)``,
* retained-claim moments ``integral (x - u(c))**alpha F(dc)``,
* the sup norm ``norm0`` and Lipschitz-in-x seminorm ``lip1`` of the
  premium rule,
* the compactified state-space box (``xmin``, ``xmax``, ``imax``, ``lmax``).

Premium rules are bivariate polynomials ``p(y, x) = sum C_ab y^a x^b`` with
the first slot fed by the retained claim and the second by the reserve.
Claim laws are exponential or finitely supported, which keeps all the
transforms above in closed form (verified against quadrature in the tests).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import special

__all__ = [
    "ModelError",
    "ClaimLaw",
    "RetentionPolicy",
    "PremiumSpec",
    "RiskModel",
    "SpaceBounds",
    "premium_transform",
    "premium_transform_coeffs",
    "retained_power_mean",
    "retained_claim_moment",
    "retained_claim_moment_coeffs",
    "premium_norms",
    "space_bounds",
    "space_bounds_raw",
    "check_premium_box",
]

#: Quantile level defining the upper edge of the claim working box.
CLAIM_BOX_QUANTILE = 1.0 - 1e-6

#: Grid resolution for the premium positivity/monotonicity checks.
PREMIUM_GRID = 101


class ModelError(ValueError):
    """A model configuration violates a structural requirement."""


# ---------------------------------------------------------------------------
# Claim laws
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClaimLaw:
    """Distribution of a single claim amount.

    Either exponential with rate ``rate`` or a finite atomic law given by
    ``atoms`` as (value, weight) pairs with weights summing to one.
    """

    kind: str  # "exponential" | "empirical"
    rate: Optional[float] = None
    atoms: Tuple[Tuple[float, float], ...] = ()

    @staticmethod
    def exponential(rate: float) -> "ClaimLaw":
        if not (rate > 0 and math.isfinite(rate)):
            raise ModelError(f"exponential claim rate must be positive, got {rate}")
        return ClaimLaw(kind="exponential", rate=float(rate))

    @staticmethod
    def empirical(pairs: Iterable[Tuple[float, float]]) -> "ClaimLaw":
        atoms = tuple((float(v), float(w)) for v, w in pairs)
        if not atoms:
            raise ModelError("empirical claim law needs at least one atom")
        if any(v < 0 for v, _ in atoms):
            raise ModelError("claim atom values must be nonnegative")
        if any(w <= 0 for _, w in atoms):
            raise ModelError("claim atom weights must be positive")
        total = math.fsum(w for _, w in atoms)
        if abs(total - 1.0) > 1e-12:
            raise ModelError(f"claim atom weights must sum to 1, got {total!r}")
        return ClaimLaw(kind="empirical", atoms=atoms)

    @property
    def mean(self) -> float:
        return self.moment(1)

    def moment(self, n: int) -> float:
        """Raw moment E[C^n]."""
        if n == 0:
            return 1.0
        if self.kind == "exponential":
            return math.factorial(n) / self.rate**n
        return math.fsum(w * v**n for v, w in self.atoms)

    def quantile(self, p: float) -> float:
        """Generalized inverse CDF; used for the claim working box."""
        if self.kind == "exponential":
            return -math.log1p(-p) / self.rate
        acc = 0.0
        for v, w in sorted(self.atoms):
            acc += w
            if acc >= p - 1e-15:
                return v
        return max(v for v, _ in self.atoms)

    @property
    def box_high(self) -> float:
        """Upper edge of the working box in the claim variable."""
        return self.quantile(CLAIM_BOX_QUANTILE)


# ---------------------------------------------------------------------------
# Retention policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RetentionPolicy:
    """Part of each claim kept by the insurer; the rest is ceded.

    ``proportional``: keep ``param * y``; ``excess_of_loss``: keep
    ``min(y, param)``; ``full``: keep everything.
    """

    kind: str  # "proportional" | "excess_of_loss" | "full"
    param: float = 1.0

    @staticmethod
    def proportional(theta: float) -> "RetentionPolicy":
        if not (0.0 <= theta <= 1.0):
            raise ModelError(f"proportional retention fraction must lie in [0,1], got {theta}")
        return RetentionPolicy("proportional", float(theta))

    @staticmethod
    def excess_of_loss(cap: float) -> "RetentionPolicy":
        if not (cap >= 0):
            raise ModelError(f"excess-of-loss cap must be nonnegative, got {cap}")
        return RetentionPolicy("excess_of_loss", float(cap))

    @staticmethod
    def full() -> "RetentionPolicy":
        return RetentionPolicy("full", 1.0)

    def retained(self, y):
        """Retained amount of a claim of size y (scalar or ndarray)."""
        if self.kind == "proportional":
            return self.param * np.asarray(y, dtype=float)
        if self.kind == "excess_of_loss":
            return np.minimum(np.asarray(y, dtype=float), self.param)
        return np.asarray(y, dtype=float)

    def coordinate(self) -> float:
        """Scalar coordinate used for the retention axis of occupation atoms."""
        return float(self.param) if self.kind != "full" else 1.0

    def coordinate_box(self, claims: ClaimLaw) -> Tuple[float, float]:
        """Box of the retention coordinate for moment/localizing checks."""
        if self.kind == "proportional":
            return (0.0, 1.0)
        if self.kind == "excess_of_loss":
            return (0.0, claims.box_high)
        return (0.0, 1.0)


# ---------------------------------------------------------------------------
# Premium specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PremiumSpec:
    """Polynomial premium rule p(y, x) = sum C_ab y^a x^b.

    ``norm0`` and ``lip1`` are the sup norm at x = 0 and the Lipschitz
    seminorm in x, both integrated against the claim law; they are cached
    at :meth:`RiskModel.build` time and verified by the tests.
    """

    coefficients: Tuple[Tuple[Tuple[int, int], float], ...]
    norm0: float = math.nan
    lip1: float = math.nan

    @staticmethod
    def from_mapping(coeffs: Mapping[Tuple[int, int], float]) -> "PremiumSpec":
        items = []
        for (a, b), c in coeffs.items():
            a, b, c = int(a), int(b), float(c)
            if a < 0 or b < 0:
                raise ModelError(f"premium exponents must be nonnegative, got ({a},{b})")
            if not math.isfinite(c):
                raise ModelError(f"premium coefficient C_{a}{b} not finite")
            if c != 0.0:
                items.append(((a, b), c))
        if not items:
            raise ModelError("premium rule is identically zero")
        return PremiumSpec(coefficients=tuple(sorted(items)))

    def as_dict(self) -> dict:
        return {ab: c for ab, c in self.coefficients}

    @property
    def y_degree(self) -> int:
        return max(a for (a, _), _ in self.coefficients)

    @property
    def x_degree(self) -> int:
        return max(b for (_, b), _ in self.coefficients)

    def __call__(self, y, x):
        """Evaluate p(y, x); broadcasts over numpy arguments."""
        y = np.asarray(y, dtype=float)
        x = np.asarray(x, dtype=float)
        out = np.zeros(np.broadcast(y, x).shape)
        for (a, b), c in self.coefficients:
            out += c * y**a * x**b
        return out if out.shape else float(out)


# ---------------------------------------------------------------------------
# Risk model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RiskModel:
    """Static data of the control problem.

    ``penalty`` is an optional (a, b) pair charging ``a - b * X`` at
    bankruptcy (X the terminal deficit, negative), discounted like any
    other flow.
    """

    claims: ClaimLaw
    premium: PremiumSpec
    lam: float
    q: float
    k: float
    penalty: Optional[Tuple[float, float]] = None

    @staticmethod
    def build(
        claims: ClaimLaw,
        premium_coeffs: Mapping[Tuple[int, int], float],
        lam: float,
        q: float,
        k: float,
        penalty: Optional[Tuple[float, float]] = None,
    ) -> "RiskModel":
        """Construct and validate; caches premium norms into the spec."""
        if not (lam > 0):
            raise ModelError(f"claim intensity must be positive, got {lam}")
        if not (q > 0):
            raise ModelError(f"discount rate must be positive, got {q}")
        if not (k > 1):
            raise ModelError(f"injection unit cost must exceed 1, got {k}")
        spec = PremiumSpec.from_mapping(premium_coeffs)
        norm0, lip1 = premium_norms(claims, spec)
        if not (q > lip1):
            raise ModelError(
                f"discount rate q={q} must exceed the premium Lipschitz seminorm lip1={lip1}"
            )
        spec = PremiumSpec(coefficients=spec.coefficients, norm0=norm0, lip1=lip1)
        if penalty is not None:
            a, b = float(penalty[0]), float(penalty[1])
            if a < 0 or b < 0:
                raise ModelError("penalty coefficients must be nonnegative")
            slack = norm0 / lam - a - b * claims.mean
            if slack < 0:
                raise ModelError(
                    "penalty too harsh: norm0/lambda - a - b*E[C] = "
                    f"{slack:.6g} < 0 breaks the net-profit requirement"
                )
            penalty = (a, b)
        return RiskModel(claims=claims, premium=spec, lam=lam, q=q, k=k, penalty=penalty)


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------


def retained_power_mean(claims: ClaimLaw, u: RetentionPolicy, a: int) -> float:
    """E[u(C)^a], the a-th raw moment of the retained claim.

    Closed form per (law, policy) pair: proportional/full reduce to raw
    claim moments; excess-of-loss under an exponential law uses the
    regularized lower incomplete gamma.
    """
    if a == 0:
        return 1.0
    if u.kind == "proportional":
        return u.param**a * claims.moment(a)
    if u.kind == "full":
        return claims.moment(a)
    # excess-of-loss
    cap = u.param
    if claims.kind == "empirical":
        return math.fsum(w * min(v, cap) ** a for v, w in claims.atoms)
    kappa = claims.rate
    if cap == 0.0:
        return 0.0
    # integral_0^cap z^a kappa e^{-kappa z} dz + cap^a e^{-kappa cap}
    body = (math.factorial(a) / kappa**a) * special.gammainc(a + 1, kappa * cap)
    tail = cap**a * math.exp(-kappa * cap)
    return body + tail


def premium_transform_coeffs(model: RiskModel, u: RetentionPolicy) -> np.ndarray:
    """Coefficients (ascending in x) of the premium rate p_u(x)."""
    spec = model.premium
    out = np.zeros(spec.x_degree + 1)
    for (a, b), c in spec.coefficients:
        out[b] += c * retained_power_mean(model.claims, u, a)
    return out


def premium_transform(model: RiskModel, u: RetentionPolicy, x) -> float:
    """Premium rate p_u(x) = integral p(u(c), x) F(dc)."""
    coeffs = premium_transform_coeffs(model, u)
    val = np.polynomial.polynomial.polyval(np.asarray(x, dtype=float), coeffs)
    return float(val) if np.ndim(x) == 0 else val


def retained_claim_moment_coeffs(model: RiskModel, u: RetentionPolicy, alpha: int) -> np.ndarray:
    """Coefficients in x of integral (x - u(c))^alpha F(dc), ascending.

    Expanding the binomial gives coefficient binom(alpha, i) * (-1)^i *
    E[u(C)^i] on x^(alpha-i).  For exponential claims with proportional
    retention theta this collapses to the arrangement-number form
    (-1)^i * alpha!/(alpha-i)! * (theta/kappa)^i, which the tests pin
    against quadrature.
    """
    if alpha < 0:
        raise ModelError("moment degree must be nonnegative")
    out = np.zeros(alpha + 1)
    for i in range(alpha + 1):
        out[alpha - i] = (
            math.comb(alpha, i) * (-1.0) ** i * retained_power_mean(model.claims, u, i)
        )
    return out


def retained_claim_moment(model: RiskModel, u: RetentionPolicy, x, alpha: int) -> float:
    """integral (x - u(c))^alpha F(dc) at reserve x."""
    coeffs = retained_claim_moment_coeffs(model, u, alpha)
    val = np.polynomial.polynomial.polyval(np.asarray(x, dtype=float), coeffs)
    return float(val) if np.ndim(x) == 0 else val


def premium_norms(claims: ClaimLaw, spec: PremiumSpec) -> Tuple[float, float]:
    """Sup norm at x = 0 and Lipschitz-in-x seminorm of the premium rule.

    norm0 = integral p(c, 0) F(dc).  lip1 is the supremum over x of the
    claim-integrated inner sup |d/dx p(y, x)| over y below the claim; for
    x-degree <= 1 the difference quotient is x-free and the value is exact.
    Rules of x-degree >= 2 have no finite global Lipschitz constant and are
    rejected (the admissibility theory requires lip1 < infinity).
    """
    norm0 = math.fsum(
        c * claims.moment(a) for (a, b), c in spec.coefficients if b == 0
    )
    if spec.x_degree == 0:
        return norm0, 0.0
    if spec.x_degree > 1:
        raise ModelError(
            "premium rules of x-degree >= 2 have unbounded Lipschitz seminorm in x; "
            f"got x-degree {spec.x_degree}"
        )
    # slope polynomial g(y) = sum_a C_a1 y^a; |p(y,x)-p(y,x')| = |g(y)| |x-x'|
    slope = {a: c for (a, b), c in spec.coefficients if b == 1}
    if all(c >= 0 for c in slope.values()):
        # g nonneg and nondecreasing => sup over y <= z attained at z
        lip1 = math.fsum(c * claims.moment(a) for a, c in slope.items())
    else:
        lip1 = _lip1_grid(claims, slope)
    return norm0, lip1


def _lip1_grid(claims: ClaimLaw, slope: Mapping[int, float]) -> float:
    """integral sup_{y <= z} |g(y)| F(dz) by inner grid max, outer quadrature."""
    deg = max(slope)
    coeffs = np.zeros(deg + 1)
    for a, c in slope.items():
        coeffs[a] = c

    def inner(z: float) -> float:
        ys = np.linspace(0.0, z, 513)
        return float(np.max(np.abs(np.polynomial.polynomial.polyval(ys, coeffs))))

    if claims.kind == "empirical":
        return math.fsum(w * inner(v) for v, w in claims.atoms)
    from scipy.integrate import quad

    kappa = claims.rate
    hi = claims.quantile(1.0 - 1e-12)
    val, _ = quad(lambda z: inner(z) * kappa * math.exp(-kappa * z), 0.0, hi, limit=200)
    return val


# ---------------------------------------------------------------------------
# Space bounds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpaceBounds:
    """Compactified state-space box for the occupation-measure problem.

    For a constant premium (lip1 = 0) the denominators below substitute
    the discount rate q, which only enlarges the (still valid) box.
    """

    xbar: float
    horizon: float
    eps: float
    xmin: float
    xmax: float
    imax: float
    lmax: float

    def label_box(self, label: str, model: RiskModel = None) -> Tuple[float, float]:
        """(lo, hi) range of an occupation-atom coordinate."""
        if label in ("s1", "s2"):
            return (0.0, self.horizon)
        if label == "y1":
            return (self.xmin, self.xmax)
        if label == "y2":
            return (0.0, self.xmax)
        if label == "l":
            return (0.0, self.lmax)
        if label == "i":
            return (0.0, self.imax)
        raise KeyError(f"unknown coordinate label {label!r}")


def space_bounds_raw(
    norm0: float, lip1: float, k: float, q: float, xbar: float, T: float, eps: float
) -> SpaceBounds:
    """Evaluate the compactification formulas from the premium norms alone.

    xmax is sized so that trajectories started below xbar stay inside the
    box up to time T except with probability about eps.
    """
    if not (0.0 < eps < 1.0):
        raise ModelError(f"pseudo-compactness tolerance must lie in (0,1), got {eps}")
    if not (T > 0):
        raise ModelError(f"horizon must be positive, got {T}")
    if not (xbar >= 0):
        raise ModelError(f"max initial capital must be nonnegative, got {xbar}")
    lip_den = lip1 if lip1 > 0 else q
    xmax = (xbar + ((k + 1) * norm0 + lip1) / ((k - 1) * lip_den)) / (eps * math.exp(-q * T))
    xmin = -norm0 / (k * lip_den)
    imax = xmax + norm0 / (k * lip_den)
    lmax = lip1 * xmax + norm0
    return SpaceBounds(
        xbar=float(xbar), horizon=float(T), eps=float(eps),
        xmin=xmin, xmax=xmax, imax=imax, lmax=lmax,
    )


def space_bounds(model: RiskModel, xbar: float, T: float, eps: float) -> SpaceBounds:
    """Compactified box for a validated model; see :func:`space_bounds_raw`."""
    return space_bounds_raw(
        model.premium.norm0, model.premium.lip1, model.k, model.q, xbar, T, eps
    )


def check_premium_box(model: RiskModel, bounds: SpaceBounds, n: int = PREMIUM_GRID) -> None:
    """Reject premium rules that are negative or decreasing on the working box.

    The box is [0, claim-quantile] x [0, xmax]; both positivity and
    monotonicity (in each argument) are required for admissibility.
    """
    ys = np.linspace(0.0, model.claims.box_high, n)
    xs = np.linspace(0.0, bounds.xmax, n)
    vals = model.premium(ys[:, None], xs[None, :])
    if np.min(vals) < -1e-12:
        iy, ix = np.unravel_index(int(np.argmin(vals)), vals.shape)
        raise ModelError(
            f"premium rule negative on the working box: p({ys[iy]:.6g}, {xs[ix]:.6g}) = "
            f"{vals[iy, ix]:.6g}"
        )
    if np.min(np.diff(vals, axis=0)) < -1e-9 or np.min(np.diff(vals, axis=1)) < -1e-9:
        raise ModelError("premium rule must be nondecreasing in both arguments on the working box")
