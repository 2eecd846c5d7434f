"""Acceptance gate: ten end-to-end criteria, one verdict line each.

Run `pytest tests/test_acceptance.py -v -s` to see the verdict lines as they
are produced (without -s they appear in the captured output of failures).
Every tolerance here is the contract the package ships under; none of them
is tuned to the current random state — seeds are frozen, oracles are analytic
or quadrature-based, and the Monte Carlo comparisons use their own measured
standard errors.
"""
from __future__ import annotations

import math
import time

import numpy as np
import pytest
from numpy.polynomial import polynomial as P

from conftest import envelope_excess, quad_premium_transform, \
    quad_retained_moment
from reinsddp import conic
from reinsddp.ddp import (
    DdpConfig,
    backward_step_grid,
    backward_step_sos,
    forward_scan,
    iterations_to_csv,
    run_ddp,
    _sos_program,
)
from reinsddp.generator import (
    RetentionFamily,
    check_dual_feasibility,
    generator_on_monomial,
)
from reinsddp.models import (
    ClaimLaw,
    RetentionPolicy,
    RiskModel,
    space_bounds,
)
from reinsddp.moments import (
    MomentVector,
    moment_matrix,
    moments_from_atoms,
    putinar_check,
)
from reinsddp.occupation import (
    AtomMeasure,
    adjoint_identity_residual,
    build_occupation,
    validate_system,
)
from reinsddp.simulate import StrategySpec, estimate_gain, simulate_ensemble


def _verdict(num: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {num:2d}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# shared fixtures


@pytest.fixture(scope="module")
def noisy_model():
    return RiskModel.build(
        claims=ClaimLaw.exponential(0.5),
        premium_coeffs={(0, 0): 1.2, (1, 0): 0.3},
        lam=1.0, q=0.5, k=2.0)


@pytest.fixture(scope="module")
def noisy_bounds(noisy_model):
    return space_bounds(noisy_model, xbar=2.5, T=3.0, eps=0.5)


@pytest.fixture(scope="module")
def unit_model():
    return RiskModel.build(
        claims=ClaimLaw.empirical([(0.5, 1.0)]),
        premium_coeffs={(0, 0): 1.0}, lam=1.0, q=0.4, k=2.0)


@pytest.fixture(scope="module")
def unit_bounds(unit_model):
    return space_bounds(unit_model, xbar=2.0, T=2.0, eps=0.5)


@pytest.fixture(scope="module")
def quiet_model():
    return RiskModel.build(
        claims=ClaimLaw.empirical([(1.0, 1.0)]),
        premium_coeffs={(0, 0): 0.5}, lam=1e-9, q=0.4, k=2.0)


@pytest.fixture(scope="module")
def quiet_bounds(quiet_model):
    # horizon long enough that the truncated tail e^{-qT} p0/q is far below
    # the 1e-2 gap target
    return space_bounds(quiet_model, xbar=2.0, T=12.0, eps=0.5)


@pytest.fixture(scope="module")
def quiet_cfg():
    return DdpConfig(n_paths=60, forward_grid=(1, 1, 2), backward_points=129,
                     backward_retentions=1, max_iter=2, method="sos",
                     retention_kind="full", ladder_depth=1,
                     occupation_grid=(16, 32), seed=3)


@pytest.fixture(scope="module")
def noisy_scan(noisy_model, noisy_bounds):
    """Forward candidates reused by the estimate-suite and containment checks."""
    return forward_scan(noisy_model, noisy_bounds, 1.0, 1.0, grid=(3, 2, 3),
                        n_paths=150, seed=5, occupation_grid=(24, 48))


# ---------------------------------------------------------------------------
# 1. analytic gain oracle at scale


def test_criterion_01_pay_all_oracle(noisy_model):
    pay_all = StrategySpec.pay_everything()
    x0, horizon, n = 1.0, 12.0, 100_000
    # horizon truncation e^{-(lam+q)T} ~ 1.5e-8 is far below the Monte Carlo
    # resolution, so the infinite-horizon closed forms apply as stated
    t0 = time.perf_counter()
    est = estimate_gain(noisy_model, pay_all, x0, horizon, n, 2026)
    el_plain = time.perf_counter() - t0
    oracle = x0 + noisy_model.premium.norm0 / (noisy_model.lam + noisy_model.q)
    z_plain = (est.mean - oracle) / est.std_error

    pen_model = RiskModel.build(
        claims=ClaimLaw.exponential(0.5),
        premium_coeffs={(0, 0): 1.2, (1, 0): 0.3},
        lam=1.0, q=0.5, k=2.0, penalty=(0.3, 0.2))
    t0 = time.perf_counter()
    est2 = estimate_gain(pen_model, pay_all, x0, horizon, n, 2027)
    el_pen = time.perf_counter() - t0
    slack = pen_model.premium.norm0 / pen_model.lam - 0.3 \
        - 0.2 * pen_model.claims.mean
    oracle2 = x0 + pen_model.lam / (pen_model.lam + pen_model.q) * slack
    z_pen = (est2.mean - oracle2) / est2.std_error

    ok = abs(z_plain) <= 3.0 and abs(z_pen) <= 3.0 \
        and el_plain <= 60.0 and el_pen <= 60.0
    _verdict(1, ok,
             f"1e5 paths: plain z={z_plain:+.2f} ({el_plain:.1f}s), "
             f"penalty z={z_pen:+.2f} ({el_pen:.1f}s)")


# ---------------------------------------------------------------------------
# 2. estimate suite: pathwise envelope and a-priori moment bounds


def test_criterion_02_estimate_suite(noisy_model, noisy_bounds, noisy_scan):
    rng = np.random.default_rng(42)
    worst = -math.inf
    count = 0
    while count < 1000:
        kind = rng.choice(["proportional", "excess_of_loss", "full"])
        if kind == "proportional":
            pol = RetentionPolicy.proportional(float(rng.uniform(0.1, 1.0)))
        elif kind == "excess_of_loss":
            pol = RetentionPolicy.excess_of_loss(float(rng.uniform(0.2, 4.0)))
        else:
            pol = RetentionPolicy.full()
        strat = StrategySpec(
            pol,
            injection_floor=float(rng.uniform(0.0, 1.0)),
            dividend_barrier=float(rng.choice([np.inf,
                                               rng.uniform(0.3, 2.4)])))
        x0 = float(rng.uniform(0.0, 2.0))
        recs = simulate_ensemble(noisy_model, strat, x0, 2.0, 20,
                                 int(rng.integers(1 << 31)), record=True)
        for rec in recs:
            worst = max(worst,
                        envelope_excess(rec, noisy_model, strat)
                        / (1.0 + rec.x0))
        count += len(recs)
    envelope_ok = worst <= 1e-9

    # discounted dividend/injection masses and the supremum-style moments of
    # the near-best forward candidates stay inside the a-priori caps
    # (3 bootstrap SEs of slack on the Monte Carlo ones)
    top = sorted(noisy_scan, key=lambda c: c.objective, reverse=True)[:3]
    failed = []
    for cand in top:
        checks = validate_system(cand.occupation, noisy_model, noisy_bounds)
        failed += [f"{cand.candidate_id}:{name}"
                   for name, chk in checks.items() if not chk["ok"]]
    ok = envelope_ok and not failed
    _verdict(2, ok,
             f"envelope worst excess {worst:.1e} over {count} draws; "
             f"bound failures: {failed or 'none'}")


# ---------------------------------------------------------------------------
# 3. adjoint identity: budget, convergence in n, exactness


def test_criterion_03_adjoint_identity(unit_model, unit_bounds):
    grid = (64, 128)
    h = min(0.01 / unit_model.lam, 0.01 / unit_model.q)
    dy = (unit_bounds.xmax - unit_bounds.xmin) / grid[1]
    n = 400
    span = unit_bounds.xmax - unit_bounds.xmin
    strategies = [
        StrategySpec(RetentionPolicy.full()),
        StrategySpec(RetentionPolicy.proportional(0.6)),
        StrategySpec(RetentionPolicy.excess_of_loss(0.8)),
        StrategySpec(RetentionPolicy.full(), dividend_barrier=1.0,
                     injection_floor=0.5),
        StrategySpec(RetentionPolicy.full(), injection_floor=math.inf),
    ]
    rng = np.random.default_rng(314)
    polys = [rng.uniform(-1, 1, 5) / span ** np.arange(5) for _ in range(20)]
    budget_rate = n ** -0.5 + h + dy
    worst_ratio = 0.0
    for si, strat in enumerate(strategies):
        recs = simulate_ensemble(unit_model, strat, 0.8, 1.5, n, 100 + si,
                                 record=True)
        occ = build_occupation(recs, unit_model, strat, 0.8, 1.5, grid,
                               bounds=unit_bounds)
        for phi in polys:
            rep = adjoint_identity_residual(occ, unit_model, phi)
            worst_ratio = max(worst_ratio,
                              rep.residual / (rep.constant * budget_rate))
    budget_ok = worst_ratio <= 1.0

    # Monte-Carlo error shrinks with the ensemble: small ensembles share
    # their leading streams with large ones (common random numbers), and the
    # seed family is frozen after a one-time verification of the statistic
    strat = StrategySpec(RetentionPolicy.full())
    phi = np.array([0.9, -0.6, 0.25, -0.04, 0.002]) / span ** np.arange(5)
    fine = (1 << 14, 1 << 20)
    wins = 0
    for j in range(10):
        seed = 4200 + j
        res = []
        for n_b in (100, 6400):
            recs = simulate_ensemble(unit_model, strat, 0.3, 1.0, n_b, seed,
                                     record=True)
            occ = build_occupation(recs, unit_model, strat, 0.3, 1.0, fine,
                                   bounds=unit_bounds, h=0.05)
            res.append(adjoint_identity_residual(occ, unit_model,
                                                 phi).residual)
        wins += res[1] < res[0]
    decrease_ok = wins >= 9

    # deterministic configuration: pure time-zero lumps telescope exactly
    exact = []
    for strat in (StrategySpec(RetentionPolicy.full(), initial_dividend=0.7),
                  StrategySpec(RetentionPolicy.full(),
                               initial_injection=0.4)):
        recs = simulate_ensemble(unit_model, strat, 2.0, 0.0, 2, 5,
                                 record=True)
        occ = build_occupation(recs, unit_model, strat, 2.0, 0.0, (16, 64),
                               bounds=unit_bounds)
        rep = adjoint_identity_residual(
            occ, unit_model, [0.3, -1.2, 0.8, 0.05, -0.4, 0.1, 0.02, -0.003])
        exact.append(rep.residual)
    exact_ok = max(exact) <= 1e-9

    ok = budget_ok and decrease_ok and exact_ok
    _verdict(3, ok,
             f"budget ratio {worst_ratio:.4f} over 100 combos; "
             f"decrease {wins}/10 batches; exact {max(exact):.1e}")


# ---------------------------------------------------------------------------
# 4. generator closed forms against independent quadrature


def test_criterion_04_generator_quadrature():
    worst = 0.0
    combos = 0
    for kappa in (0.5, 1.0, 2.0):
        model = RiskModel.build(
            claims=ClaimLaw.exponential(kappa),
            premium_coeffs={(1, 0): 1.2, (1, 1): 0.05},
            lam=1.0, q=0.15, k=2.0)
        for theta in (0.25, 0.5, 1.0):
            u = RetentionPolicy.proportional(theta)
            retained = lambda c: theta * c
            for alpha in range(7):
                poly = generator_on_monomial(model, u, alpha)
                for y in (0.0, 0.7, 2.5):
                    drift = quad_premium_transform(
                        kappa, retained, {(1, 0): 1.2, (1, 1): 0.05}, y)
                    drift *= alpha * y ** (alpha - 1) if alpha > 0 else 0.0
                    jump = model.lam * quad_retained_moment(
                        kappa, retained, y, alpha)
                    want = drift + jump - (model.lam + model.q) * y ** alpha
                    got = float(P.polyval(y, poly))
                    worst = max(worst, abs(got - want))
                combos += 1
    ok = worst <= 1e-8
    _verdict(4, ok,
             f"max |closed form - quadrature| {worst:.2e} over {combos} "
             f"(kappa, theta, alpha) combos at 3 states")


# ---------------------------------------------------------------------------
# 5. moment machinery


def test_criterion_05_moment_machinery(unit_model, unit_bounds):
    # Dirac moment matrix is rank one
    dirac = moments_from_atoms(
        AtomMeasure(("y",), np.array([[2.0]]), np.array([1.0])), 2, ("y",))
    sv = np.linalg.svd(moment_matrix(dirac, 2).values, compute_uv=False)
    rank_ok = sv[1] <= 1e-10 * sv[0]

    # quadratic form of the moment matrix equals the squared-polynomial
    # integral against the atoms
    rng = np.random.default_rng(3)
    quad_worst = 0.0
    for _ in range(5):
        pts = rng.uniform(-1.0, 2.0, size=(7, 2))
        wts = rng.uniform(0.1, 1.0, size=7)
        m = moments_from_atoms(AtomMeasure(("a", "b"), pts, wts), 2,
                               ("a", "b"))
        M = moment_matrix(m, 2)
        powers = np.array(M.basis)
        h = rng.uniform(-1.0, 1.0, size=len(M.basis))
        vals = np.prod(pts[:, None, :] ** powers[None, :, :], axis=2) @ h
        integral = float(np.dot(wts, vals ** 2))
        quad_worst = max(quad_worst, abs(h @ M.values @ h - integral))
    quad_ok = quad_worst <= 1e-10

    # Putinar PSD pass on an empirically built system at r <= 3
    strat = StrategySpec(RetentionPolicy.full(), dividend_barrier=1.2,
                         injection_floor=0.3)
    recs = simulate_ensemble(unit_model, strat, 0.8, 1.5, 300, 77,
                             record=True)
    occ = build_occupation(recs, unit_model, strat, 0.8, 1.5, (32, 64),
                           bounds=unit_bounds)
    putinar_ok = all(putinar_check(occ, unit_model, unit_bounds, r=r).passed
                     for r in (1, 2, 3))

    # negative-eigenvalue detection: a Dirac outside the working box trips a
    # localizing matrix, and Cauchy-Schwarz-violating moments trip the
    # moment matrix itself
    out_occ = build_occupation(
        simulate_ensemble(unit_model, strat, 0.8, 1.5, 10, 7, record=True),
        unit_model, strat, 0.8, 1.5, (8, 16), bounds=unit_bounds)
    far = AtomMeasure(("s1", "y1"),
                      np.array([[0.0, unit_bounds.xmax + 5.0]]),
                      np.array([1.0]))
    corrupted_system = type(out_occ)(
        gamma0=far, gamma1=out_occ.gamma1, gamma2=out_occ.gamma2,
        gamma3=out_occ.gamma3, x0=out_occ.x0, horizon=out_occ.horizon,
        grid=out_occ.grid, n_paths=out_occ.n_paths,
        retention_kind=out_occ.retention_kind, seed=out_occ.seed,
        path_stats=None)
    out_report = putinar_check(corrupted_system, unit_model, unit_bounds, r=2)
    corrupt = MomentVector(("y",), 1, {(0,): 1.0, (1,): 0.5, (2,): 0.2})
    detect_ok = (not out_report.passed) \
        and moment_matrix(corrupt, 1).min_eigenvalue() < 0

    ok = rank_ok and quad_ok and putinar_ok and detect_ok
    _verdict(5, ok,
             f"dirac rank-1 {rank_ok}, quadratic form {quad_worst:.1e}, "
             f"putinar r<=3 {putinar_ok}, negative-eig detection {detect_ok}")


# ---------------------------------------------------------------------------
# 6. weak duality sandwich across the configuration matrix


E, U = ClaimLaw.exponential, ClaimLaw.empirical
SANDWICH_MATRIX = [
    # name, claims, premium, lam, q, k, penalty, retention kind, x0, xbar, depth
    ("exp-const", E(1.0), {(0, 0): 1.0}, 1.0, 0.40, 2.0, None,
     "proportional", 1.0, 2.0, 1),
    ("exp-affine", E(0.5), {(0, 0): 1.2, (1, 0): 0.3}, 1.0, 0.50, 2.0, None,
     "proportional", 1.0, 2.5, 1),
    ("exp-penalty", E(0.5), {(0, 0): 1.2, (1, 0): 0.3}, 1.0, 0.50, 2.0,
     (0.3, 0.2), "proportional", 1.0, 2.5, 1),
    ("exp-xterm", E(1.0), {(1, 0): 1.2, (1, 1): 0.05}, 1.0, 0.30, 2.0, None,
     "proportional", 1.0, 2.0, 1),
    ("unit-full", U([(0.5, 1.0)]), {(0, 0): 1.0}, 1.0, 0.40, 2.0, None,
     "full", 1.0, 2.0, 1),
    ("twoatom-xl", U([(0.5, 0.6), (2.0, 0.4)]), {(0, 0): 1.0}, 0.8, 0.45,
     2.0, None, "excess_of_loss", 1.0, 2.0, 1),
    ("fast-claims", E(2.0), {(0, 0): 0.8}, 1.5, 0.60, 1.5, None,
     "proportional", 1.0, 2.0, 1),
    ("costly-inj", E(1.0), {(0, 0): 1.0, (1, 0): 0.2}, 1.0, 0.40, 3.0, None,
     "excess_of_loss", 1.0, 2.0, 1),
    ("sparse", E(1.0), {(0, 0): 1.0}, 0.6, 0.35, 2.0, None,
     "full", 0.4, 2.0, 1),
    ("full-penalty", E(1.0), {(0, 0): 1.0}, 1.0, 0.40, 2.0, (0.2, 0.3),
     "full", 1.0, 2.0, 1),
    ("zero-start", E(0.5), {(0, 0): 1.2, (1, 0): 0.3}, 1.0, 0.50, 2.0, None,
     "proportional", 0.0, 2.5, 2),
    ("wide-xl", E(1.0), {(0, 0): 1.2}, 1.2, 0.50, 2.5, None,
     "excess_of_loss", 1.5, 3.0, 1),
]


def test_criterion_06_sandwich_matrix():
    inverted = []
    iters = 0
    for name, claims, prem, lam, q, k, pen, kind, x0, xbar, depth \
            in SANDWICH_MATRIX:
        model = RiskModel.build(claims=claims, premium_coeffs=prem, lam=lam,
                                q=q, k=k, penalty=pen)
        bounds = space_bounds(model, xbar=xbar, T=3.0, eps=0.5)
        for seed in (11, 12, 13):
            cfg = DdpConfig(n_paths=80, forward_grid=(2, 2, 2),
                            backward_points=129, backward_retentions=9,
                            max_iter=2, method="grid", retention_kind=kind,
                            ladder_depth=depth, occupation_grid=(16, 32),
                            seed=seed)
            logs = run_ddp(model, bounds, x0, 1.0, cfg)
            iters += len(logs)
            for log in logs:
                if log.f_lb - 3 * log.std_error > log.phi_at_x0 + 1e-6:
                    inverted.append(f"{name}/{seed}/z{log.z}")
    ok = not inverted and iters >= 24
    _verdict(6, ok,
             f"{len(SANDWICH_MATRIX)} configs x 3 seeds, {iters} iterations; "
             f"inversions: {inverted or 'none'}")


# ---------------------------------------------------------------------------
# 7. deterministic end-to-end gap closure


def test_criterion_07_deterministic_end_to_end(quiet_model, quiet_bounds,
                                               quiet_cfg):
    x0 = 1.0
    value = x0 + 0.5 / quiet_model.q
    t0 = time.perf_counter()
    logs = run_ddp(quiet_model, quiet_bounds, x0, 1.0, quiet_cfg)
    elapsed = time.perf_counter() - t0
    last = logs[-1]
    ok = (len(logs) <= 2 and last.status == "converged"
          and last.gap < 1e-2 * value
          and abs(last.phi_at_x0 - value) < 1e-2 * value
          and elapsed <= 120.0)
    _verdict(7, ok,
             f"gap {last.gap:.4f} vs analytic {value:.4f} after "
             f"{len(logs)} iteration(s), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 8. negative-axis coherence


def test_criterion_08_negative_axis(quiet_model, quiet_bounds, quiet_cfg):
    k = quiet_model.k
    base = run_ddp(quiet_model, quiet_bounds, 0.0, 1.0, quiet_cfg)[-1]
    band_lo = -base.phi_at_x0 / k

    x0 = -0.4
    assert band_lo < x0 < 0
    shifted = run_ddp(quiet_model, quiet_bounds, x0, 1.0, quiet_cfg)[-1]
    affine_ok = (
        abs(shifted.phi_at_x0 - (base.phi_at_x0 + k * x0)) <= 1e-9
        and abs(shifted.f_lb - (base.f_lb + k * x0)) <= 1e-9)

    deep = run_ddp(quiet_model, quiet_bounds, 10 * band_lo, 1.0,
                   quiet_cfg)[-1]
    cemetery_ok = deep.phi_at_x0 == 0.0 and deep.f_lb == 0.0 \
        and deep.status == "cemetery"

    ok = affine_ok and cemetery_ok
    _verdict(8, ok,
             f"band [{band_lo:.3f}, 0): affine shift exact {affine_ok}; "
             f"below band reports zero {cemetery_ok}")


# ---------------------------------------------------------------------------
# 9. backward-step containment and solver self-verification


def test_criterion_09_backward_containment(noisy_model, noisy_bounds,
                                           noisy_scan):
    best = max(noisy_scan, key=lambda c: c.objective)
    mom = best.moments["gamma0_bar"]
    family = RetentionFamily("proportional")

    phi_g, b_grid = backward_step_grid(noisy_model, noisy_bounds, mom, 2,
                                       1e-3, family=family, points=257,
                                       retentions=17)
    phi_s, b_sos = backward_step_sos(noisy_model, noisy_bounds, mom, 2,
                                     1e-3, family=family, retentions=17)
    contain_ok = b_sos >= b_grid - 1e-6

    # the SOS-certified polynomial must clear the independent dense check
    grid_report = check_dual_feasibility(noisy_model, phi_s, noisy_bounds,
                                         retentions=family)
    sos_cert_ok = grid_report.passed and phi_s.certificate is not None \
        and phi_s.certificate.passed

    # self-verification on Optimal results, for both cone geometries
    prog, _meta = _sos_program(noisy_model, noisy_bounds, mom, 2, 1e-3,
                               family, 9)
    res = conic.solve(prog, tol=1e-8, max_iter=200)
    sdp_verify_ok = res.status == conic.OPTIMAL and conic.verify(prog, res)
    lp = conic.ConicProgram(
        np.array([1.0, 2.0, 0.0]),
        np.array([[1.0, 1.0, 1.0]]), np.array([1.0]),
        (conic.ConeBlock("nonneg", 3),))
    lres = conic.solve(lp)
    lp_verify_ok = lres.status == conic.OPTIMAL and conic.verify(lp, lres)

    ok = contain_ok and sos_cert_ok and sdp_verify_ok and lp_verify_ok
    _verdict(9, ok,
             f"B(sos) {b_sos:.6f} >= B(grid) - 1e-6 {b_grid - 1e-6:.6f}: "
             f"{contain_ok}; sos passes grid check {sos_cert_ok}; "
             f"verify on optimal sdp/lp {sdp_verify_ok}/{lp_verify_ok}")


# ---------------------------------------------------------------------------
# 10. reproducibility


def test_criterion_10_reproducibility(noisy_model, noisy_bounds):
    cfg = DdpConfig(n_paths=80, forward_grid=(2, 2, 2), backward_points=129,
                    backward_retentions=9, max_iter=2, method="grid",
                    retention_kind="proportional", occupation_grid=(16, 32),
                    seed=21)
    logs_a = run_ddp(noisy_model, noisy_bounds, 1.0, 1.0, cfg)
    logs_b = run_ddp(noisy_model, noisy_bounds, 1.0, 1.0, cfg)
    csv_a = iterations_to_csv(logs_a).encode()
    csv_b = iterations_to_csv(logs_b).encode()
    ok = csv_a == csv_b and len(csv_a) > 0
    _verdict(10, ok,
             f"two consecutive runs: {len(csv_a)} bytes, "
             f"byte-identical {csv_a == csv_b}")
