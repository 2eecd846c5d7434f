"""Two-stage dual dynamic programming over occupation measures.

The loop alternates a *forward* step — enumerate barrier strategies on a
grid, simulate each, bin the paths into occupation measures, and keep the
candidate with the best moment objective — with a *backward* step that fits a
polynomial dual function against the selected terminal law, either by a
row-generated LP on a dense state grid or by SOS (sum-of-squares) membership
solved as an SDP.  The dual polynomial both certifies an upper bound at the
initial reserve and feeds the next forward objective as a cutting plane.

Lower bounds come from re-simulating the selected concrete strategy to the
full truncation horizon: an implementable policy's Monte-Carlo gain is a
genuine lower bound up to confidence width, which the two-stage objective by
itself is not.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import numpy.polynomial.polynomial as P

from .models import ModelError, RetentionPolicy, RiskModel, SpaceBounds
from .simulate import StrategySpec, estimate_gain, simulate_ensemble, _seed_sequence
from .generator import (
    CHECK_GRID,
    HAMILTONIAN_GRID,
    PolyValueFn,
    RetentionFamily,
    check_dual_feasibility,
    generator_on_monomial,
)
from .occupation import (
    AdjointReport,
    OccupationSystem,
    adjoint_identity_residual,
    build_occupation,
    extend_negative,
    system_to_json,
)
from .moments import (
    MomentVector,
    Poly,
    PutinarReport,
    apply_moments,
    moments_from_atoms,
    putinar_check,
)
from . import conic

_log = logging.getLogger(__name__)

CSV_COLUMNS = ("z", "F_LB", "std_error", "B_z", "B_UB", "phi_at_x0", "gap", "status")


class DdpError(ModelError):
    """Step failure with the partial iteration log preserved."""

    def __init__(self, message: str, logs: Sequence["IterationLog"] = ()):
        super().__init__(message)
        self.logs = tuple(logs)


# ---------------------------------------------------------------------------
# configuration and records


@dataclasses.dataclass(frozen=True)
class DdpConfig:
    """Engine knobs for the two-stage loop."""

    n_paths: int = 400
    r: int = 2
    eps: float = 1e-3
    forward_grid: Tuple[int, int, int] = (8, 8, 8)
    backward_points: int = 513
    backward_retentions: int = 33
    max_iter: int = 4
    tol: float = 1e-2
    seed: int = 0
    method: str = "sos"
    retention_kind: str = "proportional"
    ladder_depth: int = 2
    occupation_grid: Tuple[int, int] = (64, 128)
    h: Optional[float] = None
    lb_paths: Optional[int] = None
    adjoint_mult: float = 3.0
    psd_tol: float = 1e-8

    def __post_init__(self):
        if self.n_paths < 2:
            raise ModelError("n_paths must be at least 2")
        if not 1 <= self.r <= 4:
            raise ModelError("relaxation order r must lie in [1, 4]")
        if self.eps < 0.0 or not math.isfinite(self.eps):
            raise ModelError("eps must be finite and >= 0")
        if len(self.forward_grid) != 3 or any(g < 1 for g in self.forward_grid):
            raise ModelError("forward_grid must be three positive counts")
        if self.backward_points < 9 or self.backward_retentions < 1:
            raise ModelError("backward grids too small")
        if self.max_iter < 1 or self.tol <= 0.0:
            raise ModelError("need max_iter >= 1 and tol > 0")
        if self.method not in ("sos", "grid"):
            raise ModelError(f"unknown backward method {self.method!r}")
        if self.retention_kind not in ("proportional", "excess_of_loss", "full"):
            raise ModelError(f"unknown retention kind {self.retention_kind!r}")
        if self.ladder_depth < 1:
            raise ModelError("ladder_depth must be >= 1")
        if self.lb_paths is not None and self.lb_paths < 2:
            raise ModelError("lb_paths must be at least 2")


@dataclasses.dataclass(frozen=True)
class ForwardCandidate:
    """One enumerated strategy with its occupation-measure evidence."""

    candidate_id: str
    strategy: StrategySpec
    occupation: OccupationSystem
    moments: Mapping[str, MomentVector]
    objective: float
    putinar: PutinarReport
    adjoint: Tuple[AdjointReport, ...]
    adjoint_ok: bool

    @property
    def feasible(self) -> bool:
        return bool(self.putinar.passed and self.adjoint_ok)

    def recompute_objective(self, k: float,
                            phi_prev: Optional[PolyValueFn]) -> float:
        """Objective re-derived from the stored moment vectors alone."""
        return (self.moments["gamma2"].mass - k * self.moments["gamma3"].mass
                + _phi_moment_term(self.moments["gamma0_bar"], phi_prev))


@dataclasses.dataclass(frozen=True)
class IterationLog:
    z: int
    candidate_id: str
    f_lb: float
    std_error: float
    b_z: float
    b_ub: float
    phi_at_x0: float
    gap: float
    wall_time: float
    status: str


def iterations_to_csv(logs: Sequence[IterationLog]) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for rec in logs:
        lines.append(",".join([
            str(rec.z), repr(rec.f_lb), repr(rec.std_error), repr(rec.b_z),
            repr(rec.b_ub), repr(rec.phi_at_x0), repr(rec.gap), rec.status]))
    return "\n".join(lines) + "\n"


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# shared helpers


def _is_zero(phi: Optional[PolyValueFn]) -> bool:
    return phi is None or all(c == 0.0 for c in phi.coeffs)


def _require_certified(phi: Optional[PolyValueFn]) -> None:
    if _is_zero(phi):
        return
    cert = phi.certificate
    if cert is None or not cert.passed:
        raise ModelError("previous dual candidate is not PASS-certified")


def _phi_moment_term(mom0: MomentVector, phi: Optional[PolyValueFn]) -> float:
    if _is_zero(phi):
        return 0.0
    poly = Poly(("y1",), {(i,): c for i, c in enumerate(phi.coeffs)})
    return apply_moments(mom0, poly)


def _scale_for(bounds: SpaceBounds) -> float:
    return max(1.0, bounds.xmax, -bounds.xmin)


def _u_params(family: RetentionFamily, model: RiskModel, n: int) -> np.ndarray:
    return np.array([u.param for u in family.grid(model, n)])


def _candidate_moments(occ: OccupationSystem, model: RiskModel, r: int
                       ) -> Dict[str, MomentVector]:
    return {
        "gamma0_bar": moments_from_atoms(occ.gamma0, r, ("y1",),
                                         discount_q=model.q, source="gamma0_bar"),
        "gamma1": moments_from_atoms(occ.gamma1, r, ("y2", "u"), source="gamma1"),
        "gamma2": moments_from_atoms(occ.gamma2, r, ("y2", "l"), source="gamma2"),
        "gamma3": moments_from_atoms(occ.gamma3, r, ("y2", "i"), source="gamma3"),
    }


# ---------------------------------------------------------------------------
# forward step


def forward_scan(model: RiskModel, bounds: SpaceBounds, x0: float, t1: float,
                 phi_prev: Optional[PolyValueFn] = None,
                 family: Optional[RetentionFamily] = None,
                 grid: Tuple[int, int, int] = (8, 8, 8),
                 n_paths: int = 400, seed: int = 0, *,
                 r: int = 2, occupation_grid: Tuple[int, int] = (64, 128),
                 h: Optional[float] = None, psd_tol: float = 1e-8,
                 adjoint_mult: float = 3.0) -> List[ForwardCandidate]:
    """Enumerate, simulate, and score every strategy on the search grid.

    Candidates get independent spawned seeds (deterministic in the
    enumeration index, so a parallel driver would reproduce the ensemble).
    Each candidate carries its moment-matrix report and the adjoint-identity
    residuals for all monomial test functions up to degree 2r; both gates
    must clear for the candidate to count as feasible.
    """
    _require_certified(phi_prev)
    if not 0.0 < t1 <= bounds.horizon + 1e-12:
        raise ModelError(f"stage time {t1} outside (0, horizon]")
    family = family or RetentionFamily("proportional")

    v0_guess = phi_prev(0.0) if not _is_zero(phi_prev) else model.premium.norm0 / model.q
    if x0 < 0.0 and x0 < -v0_guess / model.k:
        return [_bankrupt_candidate(model, bounds, x0, t1, family, seed, r)]

    n_theta, n_floor, n_barrier = grid
    lo_u, hi_u = family.param_bounds(model)
    thetas = sorted({lo_u + (hi_u - lo_u) * (i + 1) / n_theta for i in range(n_theta)})
    floors = np.linspace(0.0, v0_guess / model.k, n_floor)
    barriers = np.linspace(0.0, bounds.xbar, n_barrier)

    strategies = []
    for th in thetas:
        for a in floors:
            for b in barriers:
                strategies.append(StrategySpec(
                    retention=family.policy(float(th)),
                    injection_floor=float(a), dividend_barrier=float(b)))

    children = _seed_sequence(seed).spawn(len(strategies))
    x0_sim = max(x0, 0.0)
    h_eff = h if h is not None else min(0.01 / model.lam, 0.01 / model.q)
    dy = (bounds.xmax - bounds.xmin) / occupation_grid[1]
    dt = t1 / occupation_grid[0]
    budget_rate = 1.0 / math.sqrt(n_paths) + h_eff + dy + dt

    out: List[ForwardCandidate] = []
    for idx, strat in enumerate(strategies):
        recs = simulate_ensemble(model, strat, x0_sim, t1, n_paths,
                                 children[idx], record=True)
        occ = build_occupation(recs, model, strat, x0_sim, t1,
                               grid=occupation_grid, bounds=bounds, h=h)
        if x0 < 0.0:
            occ = extend_negative(x0, model, occ, v0_guess)
        moms = _candidate_moments(occ, model, r)
        objective = (moms["gamma2"].mass - model.k * moms["gamma3"].mass
                     + _phi_moment_term(moms["gamma0_bar"], phi_prev))
        put = putinar_check(occ, model, bounds, r=r, psd_tol=psd_tol)
        reports = []
        adj_ok = True
        for alpha in range(0, 2 * r + 1):
            basis = np.zeros(alpha + 1)
            basis[alpha] = 1.0
            rep = adjoint_identity_residual(occ, model, basis)
            reports.append(rep)
            if rep.residual > adjoint_mult * rep.constant * budget_rate:
                adj_ok = False
        cid = (f"c{idx:03d}[theta={strat.retention.param:.4g},"
               f"floor={strat.injection_floor:.4g},"
               f"barrier={strat.dividend_barrier:.4g}]")
        out.append(ForwardCandidate(
            candidate_id=cid, strategy=strat, occupation=occ, moments=moms,
            objective=float(objective), putinar=put,
            adjoint=tuple(reports), adjoint_ok=adj_ok))
    return out


def _bankrupt_candidate(model, bounds, x0, t1, family, seed, r) -> ForwardCandidate:
    """Immediate-bankruptcy candidate: refilling cannot pay, value is zero."""
    strat = StrategySpec(retention=family.policy(family.param_bounds(model)[1]))
    recs = simulate_ensemble(model, strat, 0.0, t1, 2, seed, record=True)
    base = build_occupation(recs, model, strat, 0.0, t1, bounds=bounds)
    occ = extend_negative(x0, model, base, model.premium.norm0 / model.q)
    moms = _candidate_moments(occ, model, r)
    put = putinar_check(occ, model, bounds, r=r)
    rep = adjoint_identity_residual(occ, model, np.array([1.0]))
    return ForwardCandidate(
        candidate_id="bankrupt", strategy=strat, occupation=occ, moments=moms,
        objective=0.0, putinar=put, adjoint=(rep,), adjoint_ok=True)


def forward_step(model: RiskModel, bounds: SpaceBounds, x0: float, t1: float,
                 phi_prev: Optional[PolyValueFn] = None,
                 family: Optional[RetentionFamily] = None,
                 grid: Tuple[int, int, int] = (8, 8, 8),
                 n_paths: int = 400, seed: int = 0, **knobs) -> ForwardCandidate:
    """Select the feasible candidate with the largest moment objective."""
    cands = forward_scan(model, bounds, x0, t1, phi_prev, family, grid,
                         n_paths, seed, **knobs)
    if len(cands) == 1 and cands[0].candidate_id == "bankrupt":
        # analytic cemetery construction; the box gates don't apply to it
        return cands[0]
    feasible = [c for c in cands if c.feasible]
    if not feasible:
        worst_eig = min((min(c.putinar.eigenvalues.values(), default=0.0)
                         for c in cands), default=math.nan)
        worst_adj = max((max(rep.residual for rep in c.adjoint)
                         for c in cands), default=math.nan)
        raise DdpError(
            f"all {len(cands)} forward candidates failed feasibility "
            f"(worst moment-matrix eigenvalue {worst_eig:.3e}, "
            f"worst adjoint residual {worst_adj:.3e})")
    return max(feasible, key=lambda c: c.objective)


# ---------------------------------------------------------------------------
# backward step, grid LP flavour


def _derivative_columns(y: np.ndarray, d: int) -> np.ndarray:
    """Columns beta * y^(beta-1) for beta = 0..d-1."""
    out = np.zeros((y.size, d))
    for b in range(1, d):
        out[:, b] = b * np.power(y, b - 1)
    return out


def _power_columns(y: np.ndarray, d: int) -> np.ndarray:
    return np.column_stack([np.power(y, b) for b in range(d)])


def _generator_columns(model: RiskModel, u: RetentionPolicy, y: np.ndarray,
                       d: int, scale: float) -> np.ndarray:
    """Columns [L_u y^beta](y) / scale^beta, evaluated in original units."""
    cols = np.empty((y.size, d))
    for b in range(d):
        cols[:, b] = P.polyval(y, generator_on_monomial(model, u, b)) / scale ** b
    return cols


def _merged_grid(lo: float, hi: float, n: int) -> np.ndarray:
    return np.unique(np.concatenate([
        np.linspace(lo, hi, n), np.linspace(lo, hi, 2 * n - 1)]))


def _backward_pools(model, bounds, family, d, eps, points, n_u, scale):
    """Constraint pools (G, h) with rows g . C' <= h, in rescaled units.

    The pools cover the working grid, a doubled verification grid, and the
    exact evaluation points of the dense certification check (including its
    full retention grid), so a solution clean on the whole pool passes the
    final certificate up to solver residual.
    """
    cert_full = np.linspace(bounds.xmin, bounds.xmax, CHECK_GRID)
    cert_pos = cert_full[cert_full >= 0.0]
    y_pos = np.unique(np.concatenate([
        _merged_grid(0.0, bounds.xmax, points), cert_pos, [0.0]]))
    y_full = np.unique(np.concatenate([
        _merged_grid(bounds.xmin, bounds.xmax, points), cert_full]))
    w_pos = y_pos / scale
    w_full = y_full / scale

    pools = []
    # phi' >= 1 - eps on the positive axis
    pools.append((-_derivative_columns(w_pos, d),
                  np.full(y_pos.size, -(1.0 - eps) * scale)))
    # phi' <= k + eps on the whole box
    pools.append((_derivative_columns(w_full, d),
                  np.full(y_full.size, (model.k + eps) * scale)))
    # phi >= 0 on the whole box
    pools.append((-_power_columns(w_full, d), np.zeros(y_full.size)))
    # L_u phi <= 0 on the positive axis, one pool per retention
    coarse = _u_params(family, model, n_u)
    fine = _u_params(family, model, 4 * (n_u - 1) + 1 if n_u > 1 else 1)
    cert_u = _u_params(family, model, HAMILTONIAN_GRID)
    for param in np.unique(np.concatenate([coarse, fine, cert_u])):
        u = family.policy(float(param))
        pools.append((_generator_columns(model, u, y_pos, d, scale),
                      np.zeros(y_pos.size)))
    return pools


def _seed_rows(pools) -> List[np.ndarray]:
    active = []
    n_gen = len(pools) - 3
    gen_stride = max(1, n_gen // 8)
    for i, (G, _) in enumerate(pools):
        n = G.shape[0]
        if i < 3:
            active.append(np.arange(0, n, max(1, n // 17)))
        elif (i - 3) % gen_stride == 0:
            active.append(np.arange(0, n, max(1, n // 5)))
        else:
            active.append(np.array([], dtype=np.intp))
    return active


def _solve_row_lp(objective: np.ndarray, pools, active):
    """min objective . C' over the active rows, via the conic solver.

    Variables: C' split into positive and negative parts, plus one slack
    per active inequality row.
    """
    d = objective.size
    rows = []
    rhs = []
    for (G, hvec), idx in zip(pools, active):
        if idx.size:
            rows.append(G[idx])
            rhs.append(hvec[idx])
    Gact = np.vstack(rows)
    hact = np.concatenate(rhs)
    m = Gact.shape[0]
    A = np.zeros((m, 2 * d + m))
    A[:, :d] = Gact
    A[:, d:2 * d] = -Gact
    A[:, 2 * d:] = np.eye(m)
    c = np.concatenate([objective, -objective, np.zeros(m)])
    prog = conic.ConicProgram(c, A, hact, (conic.ConeBlock("nonneg", 2 * d + m),))
    res = conic.solve(prog, tol=1e-8, max_iter=200)
    if res.status == conic.MAX_ITER:
        # wide boxes make these rows nearly parallel and the path can stall
        # just short of 1e-8; a decade looser still clears self-verification
        # and the dense certificate downstream remains the binding gate
        res = conic.solve(prog, tol=1e-7, max_iter=200)
    return prog, res


def backward_step_grid(model: RiskModel, bounds: SpaceBounds, mom: MomentVector,
                       r: int, eps: float, *, t1: Optional[float] = None,
                       family: Optional[RetentionFamily] = None,
                       points: int = 513, retentions: int = 33
                       ) -> Tuple[PolyValueFn, float]:
    """Fit the dual polynomial by a row-generated LP on dense state grids.

    Constraints: phi' >= 1-eps on [0, xmax], phi' <= k+eps on [xmin, xmax],
    phi >= 0, and L_u phi <= 0 on [0, xmax] for every retention on the grid;
    the objective integrates phi against the discounted terminal moments.
    The returned bound is priced at the certified (possibly shifted)
    coefficients, so it is always consistent with the returned function.
    """
    family = family or RetentionFamily("proportional")
    d = 2 * r + 1
    scale = _scale_for(bounds)
    objective = _objective_vector(mom, d, scale)
    pools = _backward_pools(model, bounds, family, d, eps, points, retentions, scale)
    active = _seed_rows(pools)

    coeffs_w = None
    for _round in range(60):
        prog, res = _solve_row_lp(objective, pools, active)
        if res.status == conic.INFEASIBLE:
            raise ModelError(
                "backward LP reported infeasible; impossible for eps > 0 "
                "(phi = k*y + const is feasible) - moment data is inconsistent")
        if res.status != conic.OPTIMAL:
            raise ModelError(f"backward LP did not converge: {res.status} "
                             f"({res.diagnostics})")
        if not conic.verify(prog, res):
            raise ModelError("backward LP failed solver self-verification")
        coeffs_w = res.x[:d] - res.x[d:2 * d]
        vtol = 1e-9 * (1.0 + float(np.abs(coeffs_w).max()))
        new_any = False
        for i, (G, hvec) in enumerate(pools):
            gap = G @ coeffs_w - hvec
            bad = np.flatnonzero(gap > vtol)
            if bad.size:
                order = np.argsort(gap[bad], kind="stable")[::-1][:40]
                merged = np.union1d(active[i], bad[order])
                if merged.size > active[i].size:
                    active[i] = merged
                    new_any = True
        if not new_any:
            break
    else:
        raise ModelError("backward LP row generation did not settle")

    coeffs_y = coeffs_w / scale ** np.arange(d)
    return _finalize_backward(model, bounds, family, coeffs_y, r, eps, mom,
                              retentions)


def _objective_vector(mom: MomentVector, d: int, scale: float) -> np.ndarray:
    try:
        return np.array([mom.entries[(b,)] / scale ** b for b in range(d)])
    except KeyError as exc:
        raise ModelError(f"terminal moments missing power {exc}") from None


# ---------------------------------------------------------------------------
# backward step, SOS flavour


def _tri_pairs(side: int):
    il, jl = np.tril_indices(side)
    return list(zip(il.tolist(), jl.tolist()))


def _gram_coeff_rows(side: int, theta: np.ndarray, n_pows: int) -> np.ndarray:
    """K with K[p, :] . svec(G) = coefficient of w^p in theta * sigma_G."""
    pairs = _tri_pairs(side)
    K = np.zeros((n_pows, len(pairs)))
    for col, (i, j) in enumerate(pairs):
        wgt = 1.0 if i == j else math.sqrt(2.0)
        for m, th in enumerate(theta):
            p = i + j + m
            if th != 0.0 and p < n_pows:
                K[p, col] += wgt * th
    return K


def _sos_program(model: RiskModel, bounds: SpaceBounds, mom: MomentVector,
                 r: int, eps: float, family: RetentionFamily,
                 retentions: int) -> Tuple[conic.ConicProgram, dict]:
    """Assemble the SOS backward problem as one conic program.

    Each inequality becomes residual = sigma_0 + sigma_1 * theta with Gram
    blocks of sides (r+1, r): every residual polynomial has degree at most
    2r because drift premiums are affine in the reserve, so the degree cap
    needs no per-group bookkeeping.  Solved in box-rescaled coordinates
    w = y / scale with coefficient variables C'_beta = C_beta scale^beta.
    """
    d = 2 * r + 1
    scale = _scale_for(bounds)
    wmin, wmax = bounds.xmin / scale, bounds.xmax / scale
    theta_pos = np.array([0.0, wmax, -1.0])                  # w (wmax - w)
    theta_box = np.array([-wmin * wmax, wmin + wmax, -1.0])  # (w-wmin)(wmax-w)

    # rows of T give the w^p coefficient of the residual as a map of C'
    deriv_T = np.zeros((d, d))
    for b in range(1, d):
        deriv_T[b - 1, b] = b
    power_T = np.eye(d)

    groups = []  # (name, T, const_vec, theta)
    lower = np.zeros(d)
    lower[0] = -(1.0 - eps) * scale
    groups.append(("deriv_lower", deriv_T, lower, theta_pos))
    upper = np.zeros(d)
    upper[0] = (model.k + eps) * scale
    groups.append(("deriv_upper", -deriv_T, upper, theta_box))
    groups.append(("nonneg", power_T, np.zeros(d), theta_box))
    pow_scale = scale ** np.arange(d)
    for param in _u_params(family, model, retentions):
        u = family.policy(float(param))
        T = np.zeros((d, d))
        for b in range(d):
            gen = generator_on_monomial(model, u, b)
            T[: gen.size, b] = -gen * pow_scale[: gen.size] / scale ** b
        groups.append((f"generator[{param:.6g}]", T, np.zeros(d), theta_pos))

    side0, side1 = r + 1, r
    k0 = _gram_coeff_rows(side0, np.array([1.0]), d)
    blocks = [conic.ConeBlock("nonneg", 2 * d)]
    n_vars = 2 * d
    col_of = []
    for name, T, const, theta in groups:
        k1_cols = (side1 * (side1 + 1)) // 2
        col_of.append((n_vars, n_vars + k0.shape[1],
                       n_vars + k0.shape[1] + k1_cols))
        blocks.append(conic.ConeBlock("psd", side0))
        blocks.append(conic.ConeBlock("psd", side1))
        n_vars += k0.shape[1] + k1_cols

    m = d * len(groups)
    A = np.zeros((m, n_vars))
    b_vec = np.zeros(m)
    for gi, (name, T, const, theta) in enumerate(groups):
        k1 = _gram_coeff_rows(side1, theta, d)
        rows = slice(gi * d, (gi + 1) * d)
        A[rows, :d] = T
        A[rows, d:2 * d] = -T
        c0, c1, c2 = col_of[gi]
        A[rows, c0:c1] = -k0
        A[rows, c1:c2] = -k1
        b_vec[rows] = -const
    obj_half = _objective_vector(mom, d, scale)
    objective = np.concatenate([obj_half, -obj_half, np.zeros(n_vars - 2 * d)])
    prog = conic.ConicProgram(objective, A, b_vec, tuple(blocks))
    meta = {"groups": [g[0] for g in groups], "sides": (side0, side1),
            "scale": scale}
    return prog, meta


def backward_step_sos(model: RiskModel, bounds: SpaceBounds, mom: MomentVector,
                      r: int, eps: float, *, t1: Optional[float] = None,
                      family: Optional[RetentionFamily] = None,
                      retentions: int = 33, points: int = 513
                      ) -> Tuple[PolyValueFn, float]:
    """Fit the dual polynomial with SOS certificates; falls back to the
    grid LP when the SDP stalls at its iteration cap."""
    family = family or RetentionFamily("proportional")
    prog, meta = _sos_program(model, bounds, mom, r, eps, family, retentions)
    res = conic.solve(prog, tol=1e-8, max_iter=200)
    if res.status == conic.MAX_ITER:
        _log.warning("SOS backward step hit the iteration cap (%s); "
                     "falling back to the grid LP", res.diagnostics)
        return backward_step_grid(model, bounds, mom, r, eps, family=family,
                                  points=points, retentions=retentions)
    if res.status != conic.OPTIMAL:
        raise ModelError(f"SOS backward step failed: {res.status}")
    if not conic.verify(prog, res):
        raise ModelError("SOS backward step failed solver self-verification")
    d = 2 * r + 1
    coeffs_w = res.x[:d] - res.x[d:2 * d]
    coeffs_y = coeffs_w / meta["scale"] ** np.arange(d)
    return _finalize_backward(model, bounds, family, coeffs_y, r, eps, mom,
                              retentions)


def _finalize_backward(model, bounds, family, coeffs_y, r, eps, mom, retentions
                       ) -> Tuple[PolyValueFn, float]:
    """Certify the fitted polynomial (repairing by a constant shift when the
    dense check finds generator dust) and price it against the moments."""
    phi = PolyValueFn.from_coeffs(coeffs_y, r, eps_slack=eps)
    report = check_dual_feasibility(model, phi, bounds, eps=eps, retentions=family)
    if not report.passed:
        if report.shift_applied > 0.0 and report.passed_after_shift:
            phi = phi.shifted(report.shift_applied)
            report = check_dual_feasibility(model, phi, bounds, eps=eps,
                                            retentions=family)
        if not report.passed:
            raise ModelError(
                f"backward candidate failed dual feasibility: {report}")
    certified = PolyValueFn.from_coeffs(phi.as_array(), r, eps_slack=eps,
                                        certificate=report)
    b_z = float(math.fsum(c * mom.entries[(b,)]
                          for b, c in enumerate(certified.coeffs)))
    return certified, b_z


# ---------------------------------------------------------------------------
# the two-stage loop


def run_ddp(model: RiskModel, bounds: SpaceBounds, x0: float, t1: float,
            config: DdpConfig, out_dir: Optional[str] = None
            ) -> List[IterationLog]:
    """Alternate forward selection and backward certification.

    Negative starts run the machinery at reserve zero: the value is affine
    with slope k on the refill band, so both bounds are reported as the
    zero-start figures plus k * x0.  Starts below the refill threshold
    -phi(0)/k report a zero value.  When ``out_dir`` is given,
    ``iterations.csv`` and one JSON bundle per iteration are rewritten
    atomically as soon as each iteration closes.
    """
    if t1 * config.ladder_depth > bounds.horizon + 1e-9:
        raise ModelError(
            f"time ladder {[t1 * (j + 1) for j in range(config.ladder_depth)]} "
            f"exceeds the truncation horizon {bounds.horizon}")
    family = RetentionFamily(config.retention_kind)
    children = np.random.SeedSequence(config.seed).spawn(2 * config.max_iter)
    x0_base = max(x0, 0.0)
    lb_paths = config.lb_paths or config.n_paths
    backward = backward_step_sos if config.method == "sos" else backward_step_grid
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    logs: List[IterationLog] = []
    phi_prev: Optional[PolyValueFn] = None
    try:
        for z in range(1, config.max_iter + 1):
            started = time.monotonic()
            t_z = t1 * ((z - 1) % config.ladder_depth + 1)
            cand = forward_step(
                model, bounds, x0_base, t_z, phi_prev, family,
                config.forward_grid, config.n_paths,
                seed=children[2 * (z - 1)], r=config.r,
                occupation_grid=config.occupation_grid, h=config.h,
                psd_tol=config.psd_tol, adjoint_mult=config.adjoint_mult)
            est = estimate_gain(model, cand.strategy, x0_base, bounds.horizon,
                                lb_paths, children[2 * (z - 1) + 1])
            phi_z, b_z = backward(
                model, bounds, cand.moments["gamma0_bar"], config.r,
                config.eps, t1=t_z, family=family,
                retentions=config.backward_retentions,
                points=config.backward_points)

            status = "ok"
            b_ub = (cand.occupation.gamma2.mass
                    - model.k * cand.occupation.gamma3.mass + b_z)
            if x0 >= 0.0:
                f_lb = est.mean
                phi_at_x0 = float(phi_z(x0))
            elif x0 < -phi_z(0.0) / model.k:
                # refilling to zero costs more than the continuation is worth
                f_lb = 0.0
                phi_at_x0 = 0.0
                status = "cemetery"
            else:
                f_lb = est.mean + model.k * x0
                phi_at_x0 = float(phi_z(0.0)) + model.k * x0
            gap = phi_at_x0 - f_lb
            if gap < config.tol and status == "ok":
                status = "converged"
            logs.append(IterationLog(
                z=z, candidate_id=cand.candidate_id, f_lb=f_lb,
                std_error=est.std_error, b_z=b_z, b_ub=b_ub,
                phi_at_x0=phi_at_x0, gap=gap,
                wall_time=time.monotonic() - started, status=status))
            if out_dir:
                _atomic_write(os.path.join(out_dir, "iterations.csv"),
                              iterations_to_csv(logs))
                _write_bundle(out_dir, z, cand, phi_z, config)
            phi_prev = phi_z
            if status in ("converged", "cemetery"):
                break
    except ModelError as exc:
        if isinstance(exc, DdpError):
            raise DdpError(str(exc), logs) from None
        raise DdpError(f"iteration {len(logs) + 1} failed: {exc}", logs) from exc
    return logs


def _write_bundle(out_dir: str, z: int, cand: ForwardCandidate,
                  phi: PolyValueFn, config: DdpConfig) -> None:
    cert = phi.certificate
    doc = {
        "z": z,
        "strategy": {
            "retention_kind": cand.strategy.retention.kind,
            "retention_param": cand.strategy.retention.param,
            "injection_floor": cand.strategy.injection_floor,
            "dividend_barrier": cand.strategy.dividend_barrier,
        },
        "objective": cand.objective,
        "moments": {name: json.loads(m.to_json())
                    for name, m in cand.moments.items()},
        "phi": {"coeffs": list(phi.coeffs), "r": phi.r, "eps": phi.eps_slack},
        "certificate": None if cert is None else {
            "passed": cert.passed,
            "phi_min": cert.phi_min,
            "deriv_min": cert.deriv_min,
            "deriv_max": cert.deriv_max,
            "generator_max": cert.generator_max,
            "shift_applied": cert.shift_applied,
        },
        "putinar": {"passed": cand.putinar.passed,
                    "min_eigenvalues": dict(cand.putinar.eigenvalues)},
        "adjoint_residuals": [rep.residual for rep in cand.adjoint],
        "occupation": json.loads(system_to_json(cand.occupation)),
    }
    _atomic_write(os.path.join(out_dir, f"iteration_{z:03d}.json"),
                  json.dumps(doc, indent=1, sort_keys=True))
