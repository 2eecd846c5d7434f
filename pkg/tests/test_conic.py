"""Interior-point conic solver: packed storage, statuses, oracles, verify."""
import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from reinsddp.models import ModelError
from reinsddp.conic import (
    INFEASIBLE,
    MAX_ITER,
    OPTIMAL,
    UNBOUNDED,
    ConeBlock,
    ConicProgram,
    SolveResult,
    smat,
    solve,
    svec,
    svec_dim,
    verify,
)

_SQRT2 = math.sqrt(2.0)


def _lp(c, A, b):
    return ConicProgram(np.asarray(c, float), np.asarray(A, float).reshape(len(b), -1),
                        np.asarray(b, float), (ConeBlock("nonneg", len(c)),))


# ---------------------------------------------------------------------------
# packed symmetric storage


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
def test_svec_roundtrip_and_inner_product(p, seed):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(p, p))
    C = rng.normal(size=(p, p))
    M = B + B.T
    N = C + C.T
    np.testing.assert_allclose(smat(svec(M)), M, atol=1e-12)
    assert svec(M) @ svec(N) == pytest.approx(np.sum(M * N), rel=1e-12, abs=1e-12)
    assert svec(M).shape == (svec_dim(p),)


def test_smat_rejects_bad_length():
    with pytest.raises(ModelError):
        smat(np.arange(4.0))


# ---------------------------------------------------------------------------
# containers


def test_program_validates_partition():
    with pytest.raises(ModelError):
        ConicProgram(np.zeros(3), np.zeros((1, 3)), np.zeros(1),
                     (ConeBlock("nonneg", 2),))
    with pytest.raises(ModelError):
        ConeBlock("simplex", 2)
    with pytest.raises(ModelError):
        ConicProgram(np.zeros(2), np.zeros((1, 3)), np.zeros(1),
                     (ConeBlock("nonneg", 2),))


def test_dump_triplets_roundtrippable_text():
    prog = _lp([1.0, 0.0], [[1.0, -1.0]], [1.0])
    text = prog.dump_triplets()
    assert "vars 2 eqs 1" in text
    assert "cones nonneg:2" in text
    assert text == prog.dump_triplets()  # deterministic
    lines = text.splitlines()
    assert lines[0] == "conic-program v1"
    assert lines[-1] == "end"


# ---------------------------------------------------------------------------
# the three canonical statuses


def test_scalar_lp_lower_bound():
    # min x subject to x >= 1, written with a surplus variable
    prog = _lp([1.0, 0.0], [[1.0, -1.0]], [1.0])
    res = solve(prog)
    assert res.status == OPTIMAL
    assert res.objective == pytest.approx(1.0, abs=1e-7)
    assert res.x[0] == pytest.approx(1.0, abs=1e-6)
    assert verify(prog, res, 1e-6)


def test_min_diagonal_of_psd_matrix():
    # min t with [[t, 1], [1, t]] PSD: eigenvalues t +/- 1, so t* = 1
    prog = ConicProgram(
        np.array([1.0, 0.0, 0.0]),
        np.array([[0.0, 1.0, 0.0], [1.0, 0.0, -1.0]]),
        np.array([_SQRT2, 0.0]),
        (ConeBlock("psd", 2),))
    res = solve(prog)
    assert res.status == OPTIMAL
    assert res.objective == pytest.approx(1.0, abs=1e-6)
    M = smat(res.x)
    np.testing.assert_allclose(M, [[1.0, 1.0], [1.0, 1.0]], atol=1e-5)
    assert np.linalg.eigvalsh(M)[0] >= -1e-7
    assert verify(prog, res, 1e-6)


def test_inconsistent_orthant_program_is_infeasible():
    # x1 + x2 = 1 and x1 - x2 = 3 force x2 = -1 < 0
    prog = _lp([0.0, 0.0], [[1.0, 1.0], [1.0, -1.0]], [1.0, 3.0])
    res = solve(prog)
    assert res.status == INFEASIBLE
    # Farkas certificate: A'y + s = 0, s >= 0, b'y = 1
    assert prog.eq_rhs @ res.y == pytest.approx(1.0, rel=1e-6)
    assert np.all(res.s >= -1e-9)
    assert np.linalg.norm(prog.eq_matrix.T @ res.y + res.s) < 1e-6


def test_unbounded_program_returns_ray():
    prog = ConicProgram(np.array([-1.0]), np.zeros((0, 1)), np.zeros(0),
                        (ConeBlock("nonneg", 1),))
    res = solve(prog)
    assert res.status == UNBOUNDED
    assert prog.objective @ res.x == pytest.approx(-1.0, rel=1e-9)
    assert np.all(res.x >= 0.0)


# ---------------------------------------------------------------------------
# oracles


def test_random_lps_match_linprog():
    rng = np.random.default_rng(7)
    for _ in range(4):
        m, n = 5, 9
        A = rng.normal(size=(m, n))
        x_feas = rng.uniform(0.5, 1.5, size=n)
        b = A @ x_feas
        # dual-feasible construction keeps the problem bounded below
        c = A.T @ rng.normal(size=m) + rng.uniform(0.1, 1.0, size=n)
        prog = _lp(c, A, b)
        res = solve(prog)
        assert res.status == OPTIMAL
        ref = linprog(c, A_eq=A, b_eq=b, bounds=(0, None), method="highs")
        assert ref.status == 0
        assert res.objective == pytest.approx(ref.fun, rel=1e-6, abs=1e-6)
        assert verify(prog, res, 1e-6)
        # weak duality for the returned pair
        assert prog.objective @ res.x - prog.eq_rhs @ res.y >= -1e-7


def test_largest_eigenvalue_as_sdp():
    rng = np.random.default_rng(21)
    for _ in range(3):
        p = 4
        B = rng.normal(size=(p, p))
        C = B + B.T
        shift = float(np.linalg.norm(C)) + 1.0
        sd = svec_dim(p)
        # variables (t, svec(Y)); Y = (t - shift) I - C must be PSD
        n = 1 + sd
        il, jl = np.tril_indices(p)
        A = np.zeros((sd, n))
        b = np.zeros(sd)
        for k in range(sd):
            i, j = il[k], jl[k]
            A[k, 1 + k] = 1.0
            if i == j:
                A[k, 0] = -1.0
                b[k] = -C[i, i] - shift
            else:
                b[k] = -_SQRT2 * C[i, j]
        prog = ConicProgram(
            np.eye(n)[0], A, b,
            (ConeBlock("nonneg", 1), ConeBlock("psd", p)))
        res = solve(prog)
        assert res.status == OPTIMAL
        lam_max = float(np.linalg.eigvalsh(C)[-1])
        assert res.x[0] - shift == pytest.approx(lam_max, rel=1e-6, abs=1e-6)
        assert verify(prog, res, 1e-6)


# ---------------------------------------------------------------------------
# contract properties


def test_objective_scaling_leaves_argmin():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(4, 7))
    b = A @ rng.uniform(0.5, 1.5, size=7)
    c = A.T @ rng.normal(size=4) + rng.uniform(0.2, 1.0, size=7)
    res1 = solve(_lp(c, A, b))
    res2 = solve(_lp(5.0 * c, A, b))
    assert res1.status == OPTIMAL and res2.status == OPTIMAL
    np.testing.assert_allclose(res1.x, res2.x, atol=1e-6)
    assert res2.objective == pytest.approx(5.0 * res1.objective, rel=1e-6)


def test_solver_is_bitwise_deterministic():
    prog = _lp([1.0, 2.0, 0.5], [[1.0, 1.0, 1.0]], [2.0])
    r1 = solve(prog)
    r2 = solve(prog)
    assert r1.x.tobytes() == r2.x.tobytes()
    assert r1.y.tobytes() == r2.y.tobytes()
    assert r1.iterations == r2.iterations
    assert r1.objective == r2.objective


def test_iteration_cap_returns_status_not_crash():
    prog = _lp([1.0, 0.0], [[1.0, -1.0]], [1.0])
    res = solve(prog, max_iter=2)
    assert res.status == MAX_ITER
    assert res.iterations == 2
    with pytest.raises(ModelError):
        verify(prog, res)


def test_desk_scale_limits_enforced():
    with pytest.raises(ModelError):
        solve(ConicProgram(np.zeros(5001), np.zeros((0, 5001)), np.zeros(0),
                           (ConeBlock("nonneg", 5001),)))
    big = ConeBlock("psd", 201)
    with pytest.raises(ModelError):
        solve(ConicProgram(np.zeros(big.dim), np.zeros((0, big.dim)), np.zeros(0),
                           (big,)))


# ---------------------------------------------------------------------------
# verify as an independent gate


def test_verify_rejects_perturbed_primal():
    prog = _lp([1.0, 0.0], [[1.0, -1.0]], [1.0])
    res = solve(prog)
    assert verify(prog, res, 1e-6)
    bumped = dataclasses.replace(res, x=res.x + np.array([1e-3, 0.0]))
    assert not verify(prog, bumped, 1e-6)


def test_verify_rejects_suboptimal_feasible_point():
    prog = _lp([1.0, 0.0], [[1.0, -1.0]], [1.0])
    res = solve(prog)
    # feasible (1.1 - 0.1 = 1) but objective 1.1 leaves a 0.1 duality gap
    sub = dataclasses.replace(res, x=np.array([1.1, 0.1]), objective=1.1)
    assert not verify(prog, sub, 1e-6)
