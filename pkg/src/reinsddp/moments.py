"""Moment vectors, moment/localizing matrices, and PSD feasibility checks.

A finite atom measure on a box has, for every relaxation order r, a positive
semidefinite moment matrix, and for every polynomial that is nonnegative on
the box, a PSD localizing matrix.  Checking those eigenvalues is the cheap
necessary test that an empirical occupation system could be a genuine measure
system on its constraint box; a corrupted or out-of-box system fails it.

Everything here works in the raw power basis for fidelity to the closed-form
entries; :func:`putinar_check` rescales every coordinate affinely to [-1, 1]
before assembling matrices so that eigenvalue tolerances are meaningful at
order 4 (raw powers of reserves ~40 would swamp any fixed threshold).
PSD-ness is preserved either way: rescaling is a congruence transform.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .models import ModelError, RiskModel, SpaceBounds
from .occupation import AtomMeasure, OccupationSystem, _policy_from

__all__ = [
    "MultiIndex",
    "Poly",
    "MomentVector",
    "MomentMatrix",
    "monomial_basis",
    "moments_from_atoms",
    "apply_moments",
    "moment_matrix",
    "localizing_matrix",
    "putinar_check",
    "PutinarReport",
    "PSD_TOL",
]

MultiIndex = Tuple[int, ...]

PSD_TOL = 1e-8


def monomial_basis(n_vars: int, degree: int) -> List[MultiIndex]:
    """All exponent tuples with total degree <= ``degree``, graded order.

    Sorted by (degree, reverse-lexicographic tuple) so that every index of
    positive degree is preceded by the index with its first nonzero exponent
    decremented — the property the column-recurrence in matrix assembly needs.
    """
    if n_vars < 1 or degree < 0:
        raise ModelError("basis needs n_vars >= 1 and degree >= 0")
    out: List[MultiIndex] = []
    for d in range(degree + 1):
        level = [
            alpha
            for alpha in itertools.product(range(d + 1), repeat=n_vars)
            if sum(alpha) == d
        ]
        out.extend(sorted(level))
    return out


# ---------------------------------------------------------------------------
# polynomials over labeled variables


@dataclass(frozen=True)
class Poly:
    """Sparse polynomial: exponent tuple -> coefficient over named variables."""

    labels: Tuple[str, ...]
    terms: Mapping[MultiIndex, float]

    def __post_init__(self) -> None:
        cleaned = {}
        for alpha, c in self.terms.items():
            alpha = tuple(int(a) for a in alpha)
            if len(alpha) != len(self.labels) or any(a < 0 for a in alpha):
                raise ModelError(f"exponent tuple {alpha} does not match labels")
            c = float(c)
            if not math.isfinite(c):
                raise ModelError("polynomial coefficients must be finite")
            if c != 0.0:
                cleaned[alpha] = cleaned.get(alpha, 0.0) + c
        object.__setattr__(self, "terms", {a: c for a, c in cleaned.items() if c != 0.0})

    @property
    def degree(self) -> int:
        return max((sum(a) for a in self.terms), default=0)

    def evaluate(self, columns: Mapping[str, np.ndarray]) -> np.ndarray:
        """Evaluate at points given as per-label coordinate arrays."""
        cols = [np.asarray(columns[lab], dtype=float) for lab in self.labels]
        n = cols[0].shape[0] if cols else 0
        out = np.zeros(n)
        for alpha, c in sorted(self.terms.items()):
            term = np.full(n, c)
            for j, a in enumerate(alpha):
                if a:
                    term = term * cols[j] ** a
            out += term
        return out

    @staticmethod
    def box_generator(labels: Sequence[str], var: str, lo: float, hi: float) -> "Poly":
        """(v - lo)(hi - v) on the named axis: nonnegative exactly on [lo, hi]."""
        labels = tuple(labels)
        j = labels.index(var)

        def unit(power: int) -> MultiIndex:
            e = [0] * len(labels)
            e[j] = power
            return tuple(e)

        return Poly(labels, {unit(0): -lo * hi, unit(1): lo + hi, unit(2): -1.0})


# ---------------------------------------------------------------------------
# moment vectors


@dataclass(frozen=True)
class MomentVector:
    """Raw moments of one measure, complete to degree 2r over named variables."""

    labels: Tuple[str, ...]
    r: int
    entries: Mapping[MultiIndex, float]
    source: str = ""

    def __post_init__(self) -> None:
        zero = (0,) * len(self.labels)
        if zero not in self.entries:
            raise ModelError("moment vector must contain the mass entry")
        for v in self.entries.values():
            if not math.isfinite(v):
                raise ModelError("moment entries must be finite")

    @property
    def mass(self) -> float:
        return self.entries[(0,) * len(self.labels)]

    def to_json(self) -> str:
        doc = {
            "labels": list(self.labels),
            "r": self.r,
            "source": self.source,
            "entries": {",".join(map(str, a)): v for a, v in sorted(self.entries.items())},
        }
        return json.dumps(doc)

    @staticmethod
    def from_json(text: str) -> "MomentVector":
        doc = json.loads(text)
        entries = {
            tuple(int(s) for s in key.split(",")): float(v)
            for key, v in doc["entries"].items()
        }
        return MomentVector(tuple(doc["labels"]), int(doc["r"]), entries,
                            doc.get("source", ""))


def _monomial_columns(cols: Sequence[np.ndarray], basis: Sequence[MultiIndex]) -> np.ndarray:
    """(n_points, n_basis) monomial values, built by single-multiply recurrence."""
    n = cols[0].shape[0]
    out = np.empty((n, len(basis)))
    pos = {}
    for bi, alpha in enumerate(basis):
        d = sum(alpha)
        if d == 0:
            out[:, bi] = 1.0
        else:
            j = next(k for k, a in enumerate(alpha) if a)
            parent = alpha[:j] + (alpha[j] - 1,) + alpha[j + 1:]
            out[:, bi] = out[:, pos[parent]] * cols[j]
        pos[alpha] = bi
    return out


def moments_from_atoms(measure: AtomMeasure, r: int, variables: Sequence[str],
                       discount_q: Optional[float] = None,
                       source: str = "") -> MomentVector:
    """Exact weighted power sums up to degree 2r over the chosen coordinates.

    ``discount_q`` multiplies each atom weight by e^{-q s1} (the measure must
    then carry an s1 axis); used for the discounted terminal law.
    """
    if r < 1:
        raise ModelError("relaxation order must be >= 1")
    variables = tuple(variables)
    cols = [measure.column(v) for v in variables]
    w = measure.weights
    if discount_q is not None:
        w = w * np.exp(-float(discount_q) * measure.column("s1"))
    basis = monomial_basis(len(variables), 2 * r)
    if measure.n_atoms == 0:
        entries = {alpha: 0.0 for alpha in basis}
        # empty measures still need to be well-formed
        return MomentVector(variables, r, entries, source)
    B = _monomial_columns(cols, basis)
    vals = w @ B
    return MomentVector(variables, r, dict(zip(basis, map(float, vals))), source)


def apply_moments(m: MomentVector, poly: Poly) -> float:
    """Linear functional of the moment vector: sum of coeff * moment.

    Summed over sorted indices with exact accumulation so the result does not
    depend on term insertion order.
    """
    if tuple(poly.labels) != tuple(m.labels):
        raise ModelError("polynomial and moment vector use different variables")
    pieces = []
    for alpha, c in sorted(poly.terms.items()):
        if alpha not in m.entries:
            raise ModelError(f"moment vector lacks entry {alpha}")
        pieces.append(c * m.entries[alpha])
    return math.fsum(pieces)


# ---------------------------------------------------------------------------
# matrices


@dataclass(frozen=True)
class MomentMatrix:
    """Symmetric matrix of moments over a monomial basis."""

    basis: Tuple[MultiIndex, ...]
    values: np.ndarray
    generator: Optional[Poly] = None

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.shape != (len(self.basis), len(self.basis)):
            raise ModelError("matrix shape must match basis size")
        object.__setattr__(self, "values", v)

    def min_eigenvalue(self) -> float:
        if self.values.size == 0:
            return 0.0
        return float(np.linalg.eigvalsh((self.values + self.values.T) / 2)[0])

    def to_json(self) -> str:
        return json.dumps({
            "basis": [list(a) for a in self.basis],
            "values": self.values.reshape(-1).tolist(),
        })


def _index_sum(a: MultiIndex, b: MultiIndex) -> MultiIndex:
    return tuple(x + y for x, y in zip(a, b))


def moment_matrix(m: MomentVector, r: int) -> MomentMatrix:
    """M[i,j] = moment at basis_i + basis_j, basis up to degree r."""
    basis = monomial_basis(len(m.labels), r)
    vals = np.empty((len(basis), len(basis)))
    for i, a in enumerate(basis):
        for j in range(i, len(basis)):
            key = _index_sum(a, basis[j])
            if key not in m.entries:
                raise ModelError(f"moment vector incomplete: missing {key}")
            vals[i, j] = vals[j, i] = m.entries[key]
    return MomentMatrix(tuple(basis), vals)


def localizing_matrix(m: MomentVector, theta: Poly, r: int) -> MomentMatrix:
    """Matrix of theta-weighted moments at order r - ceil(deg(theta)/2)."""
    if tuple(theta.labels) != tuple(m.labels):
        raise ModelError("generator and moment vector use different variables")
    half = (theta.degree + 1) // 2
    order = r - half
    if order < 0:
        raise ModelError(f"order {r} too small for a degree-{theta.degree} generator")
    basis = monomial_basis(len(m.labels), order)
    vals = np.empty((len(basis), len(basis)))
    for i, a in enumerate(basis):
        for j in range(i, len(basis)):
            ab = _index_sum(a, basis[j])
            acc = []
            for delta, c in sorted(theta.terms.items()):
                key = _index_sum(ab, delta)
                if key not in m.entries:
                    raise ModelError(f"moment vector incomplete: missing {key}")
                acc.append(c * m.entries[key])
            vals[i, j] = vals[j, i] = math.fsum(acc)
    return MomentMatrix(tuple(basis), vals, generator=theta)


# ---------------------------------------------------------------------------
# Putinar feasibility of an occupation system


@dataclass(frozen=True)
class PutinarReport:
    """Minimum eigenvalue of every assembled matrix, and the overall verdict."""

    passed: bool
    r: int
    psd_tol: float
    eigenvalues: Dict[str, float] = field(default_factory=dict)

    @property
    def failures(self) -> List[str]:
        return [k for k, v in self.eigenvalues.items() if v < -self.psd_tol]


def _rescaler(lo: float, hi: float):
    span = hi - lo
    if span <= 1e-12:
        return lambda v: np.zeros_like(np.asarray(v, dtype=float))
    return lambda v: (2.0 * np.asarray(v, dtype=float) - lo - hi) / span


def putinar_check(occ: OccupationSystem, model: RiskModel, bounds: SpaceBounds,
                  r: int = 2, psd_tol: float = PSD_TOL) -> PutinarReport:
    """PSD test of every moment and localizing matrix of the system.

    The terminal law enters discounted (weights times e^{-q s1}).  Per
    measure, box generators follow the constraint set: stop-time and
    stop-reserve boxes everywhere; the retention box on the flowing measures;
    the reserve box on drift and dividend positions (injection sweep
    positions are unconstrained); lump and injection size boxes.  Matrices
    are assembled in [-1,1]-rescaled coordinates; generators are evaluated
    at the original atom coordinates, which is the same localizing matrix up
    to congruence.
    """
    if r < 1 or r > 6:
        raise ModelError("relaxation order must be in 1..6")
    q = model.q
    y1_low = bounds.xmin  # equals -norm0/(k*lip1) for standard bounds
    policy = _policy_from(occ.retention_kind, 1.0)
    u_box = policy.coordinate_box(model.claims)
    T = bounds.horizon

    # per measure: variables, then (name, coordinate, lo, hi) box generators
    plans = {
        "gamma0": (("s1", "y1"),
                   [("s1_box", "s1", 0.0, T), ("y1_box", "y1", y1_low, bounds.xmax)]),
        "gamma1": (("s1", "y1", "y2", "u"),
                   [("s1_box", "s1", 0.0, T), ("y1_box", "y1", y1_low, bounds.xmax),
                    ("y2_box", "y2", 0.0, bounds.xmax), ("u_box", "u", *u_box)]),
        "gamma2": (("s1", "y1", "y2", "u", "l"),
                   [("s1_box", "s1", 0.0, T), ("y1_box", "y1", y1_low, bounds.xmax),
                    ("y2_box", "y2", 0.0, bounds.xmax), ("u_box", "u", *u_box),
                    ("l_box", "l", 0.0, bounds.lmax)]),
        "gamma3": (("s1", "y1", "y2", "u", "i"),
                   [("s1_box", "s1", 0.0, T), ("y1_box", "y1", y1_low, bounds.xmax),
                    ("u_box", "u", *u_box), ("i_box", "i", 0.0, bounds.imax)]),
    }
    eigs: Dict[str, float] = {}
    for name, g in occ.measures().items():
        variables, gens = plans[name]
        if g.n_atoms == 0:
            continue
        w = g.weights
        if name == "gamma0":
            w = w * np.exp(-q * g.column("s1"))
        raw_cols = {v: g.column(v) for v in variables}
        cols = []
        for v in variables:
            lo, hi = bounds.label_box(v) if v != "u" else u_box
            if name == "gamma3" and v == "y2":
                # injection sweeps reach below zero; box only for conditioning
                lo, hi = -bounds.imax, bounds.xmax
            cols.append(_rescaler(lo, hi)(raw_cols[v]))
        basis = monomial_basis(len(variables), r)
        n_loc = len(monomial_basis(len(variables), r - 1))
        B = _monomial_columns(cols, basis)
        M = (B * w[:, None]).T @ B
        eigs[f"{name}:moment"] = MomentMatrix(tuple(basis), M).min_eigenvalue()
        B_loc = B[:, :n_loc]
        loc_basis = tuple(basis[:n_loc])
        for gen_name, var, lo, hi in gens:
            theta = Poly.box_generator(variables, var, lo, hi)
            tw = w * theta.evaluate(raw_cols)
            M_loc = (B_loc * tw[:, None]).T @ B_loc
            eigs[f"{name}:{gen_name}"] = MomentMatrix(loc_basis, M_loc).min_eigenvalue()

    passed = all(v >= -psd_tol for v in eigs.values())
    return PutinarReport(passed=passed, r=r, psd_tol=psd_tol, eigenvalues=eigs)
