"""Self-contained dense interior-point solver for orthant/PSD conic programs.

Problems take the standard form

    minimize    <c, z>
    subject to  A z = b,    z in K,

where ``K`` is a cartesian product of nonnegative orthants and packed
positive-semidefinite cones.  The solver runs a Mehrotra-style
predictor-corrector on the homogeneous self-dual embedding, so infeasible and
unbounded programs come back as clean statuses instead of numerical garbage.
Everything is dense: the programs the backward pass produces are small (a few
hundred variables), and a dense Cholesky of the normal equations is both fast
and deterministic at that scale.

Symmetric matrices travel in svec form: the lower triangle packed row by row,
off-diagonal entries scaled by sqrt(2) so that the packed inner product equals
the Frobenius inner product and the cone is self-dual.
"""
from __future__ import annotations

import dataclasses
import math
from typing import Mapping, Optional, Tuple

import numpy as np
import scipy.linalg as sla

from .models import ModelError

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITER = "max_iter"

_MAX_VARS = 5000
_MAX_SIDE = 200
_STEP_BACK = 0.99
_SQRT2 = math.sqrt(2.0)
# ratio tau/kappa below which the iterate is treated as a certificate ray
_RAY_RATIO = 1e-6
_CERT_TOL = 1e-7


class _NumericalFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# packed symmetric storage


def svec_dim(side: int) -> int:
    return side * (side + 1) // 2


def svec(mat: np.ndarray) -> np.ndarray:
    """Pack a symmetric matrix, lower triangle row-major, sqrt(2) off-diagonal."""
    mat = np.asarray(mat, dtype=float)
    p = mat.shape[0]
    il, jl = np.tril_indices(p)
    out = mat[il, jl].copy()
    out[il != jl] *= _SQRT2
    return out


def smat(vec: np.ndarray) -> np.ndarray:
    """Inverse of :func:`svec`."""
    vec = np.asarray(vec, dtype=float)
    d = vec.shape[0]
    p = int((math.isqrt(8 * d + 1) - 1) // 2)
    if svec_dim(p) != d:
        raise ModelError(f"length {d} is not a packed symmetric size")
    il, jl = np.tril_indices(p)
    vals = vec.copy()
    vals[il != jl] /= _SQRT2
    out = np.zeros((p, p))
    out[il, jl] = vals
    out[jl, il] = vals
    return out


# ---------------------------------------------------------------------------
# program containers


@dataclasses.dataclass(frozen=True)
class ConeBlock:
    """One block of the decision vector: "nonneg" (size n) or "psd" (side s)."""

    kind: str
    size: int

    def __post_init__(self):
        if self.kind not in ("nonneg", "psd"):
            raise ModelError(f"unknown cone kind {self.kind!r}")
        if self.size < 1:
            raise ModelError("cone block size must be positive")

    @property
    def dim(self) -> int:
        return self.size if self.kind == "nonneg" else svec_dim(self.size)


@dataclasses.dataclass(frozen=True)
class ConicProgram:
    objective: np.ndarray
    eq_matrix: np.ndarray
    eq_rhs: np.ndarray
    cones: Tuple[ConeBlock, ...]
    names: Optional[Mapping[str, int]] = None

    def __post_init__(self):
        c = np.ascontiguousarray(self.objective, dtype=float)
        A = np.ascontiguousarray(self.eq_matrix, dtype=float)
        b = np.ascontiguousarray(self.eq_rhs, dtype=float)
        if A.ndim != 2 or c.ndim != 1 or b.ndim != 1:
            raise ModelError("objective/rhs must be vectors and eq_matrix a matrix")
        if A.shape != (b.shape[0], c.shape[0]):
            raise ModelError(
                f"equality shape {A.shape} incompatible with "
                f"{c.shape[0]} variables / {b.shape[0]} rows")
        total = sum(blk.dim for blk in self.cones)
        if total != c.shape[0]:
            raise ModelError(
                f"cone blocks cover {total} variables, objective has {c.shape[0]}")
        if not (np.isfinite(c).all() and np.isfinite(A).all() and np.isfinite(b).all()):
            raise ModelError("program data must be finite")
        object.__setattr__(self, "objective", c)
        object.__setattr__(self, "eq_matrix", A)
        object.__setattr__(self, "eq_rhs", b)
        object.__setattr__(self, "cones", tuple(self.cones))

    @property
    def n_vars(self) -> int:
        return self.objective.shape[0]

    @property
    def n_eq(self) -> int:
        return self.eq_rhs.shape[0]

    def dump_triplets(self) -> str:
        """Plain-text sparse triplet dump for offline inspection."""
        lines = ["conic-program v1",
                 f"vars {self.n_vars} eqs {self.n_eq}",
                 "cones " + " ".join(f"{blk.kind}:{blk.size}" for blk in self.cones),
                 "objective"]
        for i in np.flatnonzero(self.objective):
            lines.append(f"{i} {self.objective[i]!r}")
        lines.append("equalities")
        rows, cols = np.nonzero(self.eq_matrix)
        for i, j in zip(rows, cols):
            lines.append(f"{i} {j} {self.eq_matrix[i, j]!r}")
        lines.append("rhs")
        for i in np.flatnonzero(self.eq_rhs):
            lines.append(f"{i} {self.eq_rhs[i]!r}")
        lines.append("end")
        return "\n".join(lines) + "\n"


@dataclasses.dataclass(frozen=True)
class SolveResult:
    """Outcome of a conic solve.

    For ``optimal`` the vectors are the scaled primal/dual solution and
    ``residuals`` holds relative primal/dual/gap errors.  For ``infeasible``
    the (y, s) pair is a Farkas certificate normalized to b'y = 1, and for
    ``unbounded`` x is an improving ray normalized to c'x = -1; in both cases
    the certificate residual sits in the "primal" slot and the other entries
    are NaN.
    """

    status: str
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    objective: float
    residuals: Mapping[str, float]
    iterations: int
    diagnostics: str = ""


# ---------------------------------------------------------------------------
# block helpers


def _block_slices(cones):
    out = []
    at = 0
    for blk in cones:
        d = blk.dim
        out.append((blk.kind, blk.size, slice(at, at + d)))
        at += d
    return out


def _cone_identity(blocks, n):
    e = np.zeros(n)
    for kind, size, sl in blocks:
        e[sl] = 1.0 if kind == "nonneg" else svec(np.eye(size))
    return e


def _chol(mat):
    try:
        return sla.cholesky(mat, lower=True)
    except sla.LinAlgError as exc:
        raise _NumericalFailure(f"cone iterate lost definiteness: {exc}") from exc


def _scalings(x, s, blocks):
    """Nesterov-Todd scaling data per block."""
    out = []
    for kind, size, sl in blocks:
        if kind == "nonneg":
            xb, sb = x[sl], s[sl]
            if np.any(xb <= 0.0) or np.any(sb <= 0.0):
                raise _NumericalFailure("orthant iterate left the interior")
            w = np.sqrt(xb / sb)
            out.append({"kind": kind, "sl": sl, "w": w, "lam": np.sqrt(xb * sb)})
        else:
            X, S = smat(x[sl]), smat(s[sl])
            Lx, Ls = _chol(X), _chol(S)
            try:
                U, sig, Vt = np.linalg.svd(Ls.T @ Lx)
            except np.linalg.LinAlgError as exc:
                raise _NumericalFailure(f"scaling SVD failed: {exc}") from exc
            if sig.min() <= 0.0:
                raise _NumericalFailure("degenerate scaling point")
            isq = 1.0 / np.sqrt(sig)
            R = Lx @ Vt.T * isq
            Rinv = (U * isq).T @ Ls.T
            out.append({"kind": kind, "sl": sl, "side": size,
                        "R": R, "Rinv": Rinv, "G": R @ R.T, "lam": sig})
    return out


def _theta_inv_matrix(blk):
    """Dense svec matrix of M -> G M G for one PSD block (symmetric, SPD)."""
    G = blk["G"]
    p = blk["side"]
    il, jl = np.tril_indices(p)
    d = il.shape[0]
    T = np.empty((d, d))
    for k in range(d):
        i, j = il[k], jl[k]
        if i == j:
            M = np.outer(G[:, i], G[:, i])
        else:
            M = (np.outer(G[:, i], G[:, j]) + np.outer(G[:, j], G[:, i])) / _SQRT2
        T[:, k] = svec(M)
    return T


def _theta_inv_apply(scal, V):
    """Apply Theta^{-1} = W W^T blockwise to a vector or matrix of columns."""
    vec = V.ndim == 1
    V2 = V[:, None] if vec else V
    out = np.empty_like(V2)
    for blk in scal:
        sl = blk["sl"]
        if blk["kind"] == "nonneg":
            out[sl] = V2[sl] * (blk["w"] ** 2)[:, None]
        else:
            T = blk.get("theta_inv")
            if T is None:
                T = _theta_inv_matrix(blk)
                blk["theta_inv"] = T
            out[sl] = T @ V2[sl]
    return out[:, 0] if vec else out


def _winv_apply(scal, g):
    out = np.empty_like(g)
    for blk in scal:
        sl = blk["sl"]
        if blk["kind"] == "nonneg":
            out[sl] = g[sl] / blk["w"]
        else:
            Rinv = blk["Rinv"]
            out[sl] = svec(Rinv.T @ smat(g[sl]) @ Rinv)
    return out


def _scaled_pair(scal, dx, ds):
    """Return (W^{-T} dx, W ds) blockwise, used by the Mehrotra corrector."""
    u = np.empty_like(dx)
    v = np.empty_like(ds)
    for blk in scal:
        sl = blk["sl"]
        if blk["kind"] == "nonneg":
            u[sl] = dx[sl] / blk["w"]
            v[sl] = ds[sl] * blk["w"]
        else:
            R, Rinv = blk["R"], blk["Rinv"]
            u[sl] = svec(Rinv @ smat(dx[sl]) @ Rinv.T)
            v[sl] = svec(R.T @ smat(ds[sl]) @ R)
    return u, v


def _compl_rhs(scal, gamma_mu, eta):
    """Solve lam o g = -lam o lam + gamma*mu*e - eta for g, blockwise."""
    n = sum(blk["sl"].stop - blk["sl"].start for blk in scal)
    g = np.empty(n)
    for blk in scal:
        sl = blk["sl"]
        lam = blk["lam"]
        if blk["kind"] == "nonneg":
            rhs = -lam * lam + gamma_mu
            if eta is not None:
                rhs = rhs - eta[sl]
            g[sl] = rhs / lam
        else:
            D = np.diag(-lam * lam + gamma_mu)
            if eta is not None:
                D = D - smat(eta[sl])
            denom = 0.5 * (lam[:, None] + lam[None, :])
            g[sl] = svec(D / denom)
    return g


def _jordan_product(scal, u, v):
    """Symmetrized product u o v blockwise (vectors in svec coordinates)."""
    out = np.empty_like(u)
    for blk in scal:
        sl = blk["sl"]
        if blk["kind"] == "nonneg":
            out[sl] = u[sl] * v[sl]
        else:
            U, V = smat(u[sl]), smat(v[sl])
            out[sl] = svec(0.5 * (U @ V + V @ U))
    return out


def _max_step(blocks, z, dz):
    """Largest alpha with z + alpha*dz still in the cone (may be inf)."""
    alpha = math.inf
    for kind, size, sl in blocks:
        if kind == "nonneg":
            neg = dz[sl] < 0.0
            if np.any(neg):
                alpha = min(alpha, float(np.min(-z[sl][neg] / dz[sl][neg])))
        else:
            Z, dZ = smat(z[sl]), smat(dz[sl])
            L = _chol(Z)
            Y = sla.solve_triangular(L, dZ, lower=True)
            B = sla.solve_triangular(L, Y.T, lower=True)
            emin = float(np.linalg.eigvalsh(0.5 * (B + B.T))[0])
            if emin < 0.0:
                alpha = min(alpha, -1.0 / emin)
    return alpha


def _factor_normal(N):
    """Cholesky of the normal matrix with escalating ridge regularization."""
    scale = max(float(np.trace(N)) / max(N.shape[0], 1), 1.0)
    for reg in (0.0, 1e-12, 1e-10, 1e-8, 1e-6):
        try:
            return sla.cho_factor(N + reg * scale * np.eye(N.shape[0]), lower=True)
        except sla.LinAlgError:
            continue
    raise _NumericalFailure("normal equations not positive definite")


# ---------------------------------------------------------------------------
# main solve


def solve(prog: ConicProgram, tol: float = 1e-8, max_iter: int = 100) -> SolveResult:
    """Primal-dual interior-point solve of a small dense conic program.

    Deterministic: identical inputs produce identical iterates.  Numerical
    failure inside the linear algebra surfaces as a ``max_iter`` status with
    a diagnostic message, never as an exception.
    """
    if prog.n_vars > _MAX_VARS:
        raise ModelError(f"{prog.n_vars} variables exceeds the dense limit {_MAX_VARS}")
    for blk in prog.cones:
        if blk.kind == "psd" and blk.size > _MAX_SIDE:
            raise ModelError(f"PSD side {blk.size} exceeds the dense limit {_MAX_SIDE}")
    if tol <= 0.0 or max_iter < 1:
        raise ModelError("tol must be positive and max_iter at least 1")

    A, b, c = prog.eq_matrix, prog.eq_rhs, prog.objective
    n, m = prog.n_vars, prog.n_eq
    blocks = _block_slices(prog.cones)
    nu = sum(size for kind, size, _ in blocks)

    x = _cone_identity(blocks, n)
    s = x.copy()
    y = np.zeros(m)
    tau, kappa = 1.0, 1.0

    normb = 1.0 + float(np.linalg.norm(b))
    normc = 1.0 + float(np.linalg.norm(c))
    normA = 1.0 + float(np.linalg.norm(A))

    def scaled_result(status, it, res, diag=""):
        t = max(tau, np.finfo(float).tiny)
        xs, ys, ss = x / t, y / t, s / t
        return SolveResult(status, xs, ys, ss, float(c @ xs), res, it, diag)

    it = 0
    while True:
        rp = A @ x - b * tau
        rd = -(A.T @ y) + c * tau - s
        rg = float(b @ y - c @ x - kappa)
        mu = (float(x @ s) + tau * kappa) / (nu + 1)

        pres = float(np.linalg.norm(rp)) / (tau * normb)
        dres = float(np.linalg.norm(rd)) / (tau * normc)
        pobj = float(c @ x) / tau
        dobj = float(b @ y) / tau
        relgap = abs(pobj - dobj) / (1.0 + max(abs(pobj), abs(dobj)))
        if max(pres, dres, relgap) <= tol:
            return scaled_result(
                OPTIMAL, it, {"primal": pres, "dual": dres, "gap": relgap})

        bty = float(b @ y)
        ctx = float(c @ x)
        if tau <= _RAY_RATIO * kappa:
            if bty > 0.0:
                cert = float(np.linalg.norm(A.T @ y + s)) / bty
                if cert <= _CERT_TOL * normA:
                    return SolveResult(
                        INFEASIBLE, x / max(tau, np.finfo(float).tiny),
                        y / bty, s / bty, math.nan,
                        {"primal": cert, "dual": math.nan, "gap": math.nan}, it)
            if ctx < 0.0:
                cert = float(np.linalg.norm(A @ x)) / (-ctx)
                if cert <= _CERT_TOL * normA:
                    return SolveResult(
                        UNBOUNDED, x / (-ctx), y.copy(), s.copy(), math.nan,
                        {"primal": cert, "dual": math.nan, "gap": math.nan}, it)

        if it >= max_iter:
            return scaled_result(
                MAX_ITER, it, {"primal": pres, "dual": dres, "gap": relgap},
                f"iteration limit at mu={mu:.3e}")
        if mu <= 1e-16:
            return scaled_result(
                MAX_ITER, it, {"primal": pres, "dual": dres, "gap": relgap},
                "complementarity collapsed without a certificate")

        try:
            scal = _scalings(x, s, blocks)
            TAt = _theta_inv_apply(scal, A.T)
            N = A @ TAt
            factor = _factor_normal(0.5 * (N + N.T)) if m else None
            thinv_c = _theta_inv_apply(scal, c)

            def normal_solve(rhs):
                return sla.cho_solve(factor, rhs) if m else rhs

            v1 = normal_solve(b + A @ thinv_c)
            x1 = _theta_inv_apply(scal, A.T @ v1 - c)
            denom = float(b @ v1 - c @ x1) + kappa / tau

            def direction(gamma, eta, eta_tk):
                """Newton direction reducing residuals by (1-gamma)."""
                g = _compl_rhs(scal, gamma * mu, eta)
                ds_part = _winv_apply(scal, g)
                d_kappa = -tau * kappa + gamma * mu - eta_tk
                rp_h, rd_h, rg_h = -(1 - gamma) * rp, -(1 - gamma) * rd, -(1 - gamma) * rg
                v0 = normal_solve(rp_h - A @ _theta_inv_apply(scal, rd_h + ds_part))
                x0 = _theta_inv_apply(scal, rd_h + ds_part + A.T @ v0)
                dtau = (rg_h + d_kappa / tau - float(b @ v0) + float(c @ x0)) / denom
                dy = v0 + dtau * v1
                dx = x0 + dtau * x1
                ds = -(A.T @ dy) + c * dtau - rd_h
                dkap = (d_kappa - kappa * dtau) / tau
                return dx, dy, ds, dtau, dkap

            dx_a, dy_a, ds_a, dtau_a, dkap_a = direction(0.0, None, 0.0)
            alpha_a = min(1.0, _max_step(blocks, x, dx_a), _max_step(blocks, s, ds_a))
            if dtau_a < 0.0:
                alpha_a = min(alpha_a, -tau / dtau_a)
            if dkap_a < 0.0:
                alpha_a = min(alpha_a, -kappa / dkap_a)
            gamma = (1.0 - alpha_a) ** 3

            u_a, v_a = _scaled_pair(scal, dx_a, ds_a)
            eta = _jordan_product(scal, u_a, v_a)
            dx, dy, ds, dtau, dkap = direction(gamma, eta, dtau_a * dkap_a)
        except _NumericalFailure as exc:
            return scaled_result(
                MAX_ITER, it, {"primal": pres, "dual": dres, "gap": relgap}, str(exc))

        alpha = min(_max_step(blocks, x, dx), _max_step(blocks, s, ds))
        if dtau < 0.0:
            alpha = min(alpha, -tau / dtau)
        if dkap < 0.0:
            alpha = min(alpha, -kappa / dkap)
        alpha = min(1.0, _STEP_BACK * alpha)

        x = x + alpha * dx
        y = y + alpha * dy
        s = s + alpha * ds
        tau = tau + alpha * dtau
        kappa = kappa + alpha * dkap
        it += 1


def verify(prog: ConicProgram, result: SolveResult, check_tol: float = 1e-6) -> bool:
    """Independent re-check of an optimal result from first principles.

    Recomputes equality residuals, cone memberships (via eigenvalue solves for
    PSD blocks), dual feasibility, and the duality gap; passes iff every check
    clears ``check_tol``.
    """
    if result.status != OPTIMAL:
        raise ModelError(f"verify requires an optimal result, got {result.status!r}")
    A, b, c = prog.eq_matrix, prog.eq_rhs, prog.objective
    x, y, s = result.x, result.y, result.s

    eq = float(np.max(np.abs(A @ x - b), initial=0.0))
    if eq > check_tol * (1.0 + float(np.max(np.abs(b), initial=0.0))):
        return False
    dualeq = float(np.max(np.abs(A.T @ y + s - c), initial=0.0))
    if dualeq > check_tol * (1.0 + float(np.max(np.abs(c), initial=0.0))):
        return False
    for kind, size, sl in _block_slices(prog.cones):
        for z in (x[sl], s[sl]):
            if kind == "nonneg":
                lo = float(np.min(z, initial=0.0))
                scale = 1.0 + float(np.max(np.abs(z), initial=0.0))
            else:
                Z = smat(z)
                lo = float(np.linalg.eigvalsh(Z)[0])
                scale = 1.0 + float(np.linalg.norm(Z))
            if lo < -check_tol * scale:
                return False
    pobj, dobj = float(c @ x), float(b @ y)
    return abs(pobj - dobj) <= check_tol * (1.0 + abs(pobj) + abs(dobj))
