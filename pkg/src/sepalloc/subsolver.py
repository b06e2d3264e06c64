"""Built-in solver for the small per-group convex subproblems.

Each subproblem minimizes

    0.5 v' Q v + q' v - sum_t w_t log(c_t' v + o_t)      over a box domain,

with Q = 2 diag(quad) + rho (A'A + I), hence positive definite with curvature
at least rho.  Smooth instances run an accelerated projected gradient with a
monotone safeguard; free-domain instances use a cached factorization; log
terms over a free domain reduce to a tiny root-finding problem in the dual of
the log arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sps
import scipy.sparse.linalg as spsla

from .canonical import ConstraintGroup, KIND_BOOL, KIND_CONT, KIND_INT

__all__ = [
    "Subproblem",
    "SubsolverResult",
    "assemble",
    "solve_subproblem",
    "subproblem_value",
    "project_domain",
    "project_domain_spec",
]

NEWTON_MAX_STEPS = 30
NEWTON_TOL = 1e-12
POWER_STEPS = 20  # documented; performed in ConstraintGroup.gram_norm


@dataclass
class Subproblem:
    """Assembled per-group minimization with quadratic coupling terms."""

    quad: np.ndarray  # diagonal of the objective's own quadratic part
    M: object  # A'A + I, dense or CSR
    rho: float
    q: np.ndarray
    logs: list  # LogTerm entries (minimized sign, weight > 0)
    lo: np.ndarray
    hi: np.ndarray
    warm: Optional[np.ndarray] = None
    cache: dict = field(default_factory=dict)  # owning group's cache
    gram_norm: float = 1.0
    replica: bool = False  # all coordinates are copies of one scalar
    free: Optional[bool] = None  # domain unbounded (cached by assemble)

    @property
    def dim(self) -> int:
        return self.q.size

    @property
    def Q(self):
        """Materialized quadratic matrix (tests and factorizations)."""
        if sps.issparse(self.M):
            return (self.rho * self.M + sps.diags(2.0 * self.quad)).tocsc()
        return self.rho * self.M + np.diag(2.0 * self.quad)

    def qmatvec(self, v: np.ndarray) -> np.ndarray:
        return 2.0 * self.quad * v + self.rho * (self.M @ v)

    def matvec_fn(self):
        """Fastest available Q@v for repeated use."""
        if sps.issparse(self.M):
            return self.qmatvec
        key = ("Qd", self.rho)
        Qd = self.cache.get(key)
        if Qd is None:
            Qd = self.rho * self.M + np.diag(2.0 * self.quad)
            self.cache[key] = Qd
        return Qd.dot

    @property
    def lipschitz(self) -> float:
        return 2.0 * float(np.max(self.quad, initial=0.0)) + self.rho * self.gram_norm

    @property
    def strong_convexity(self) -> float:
        return self.rho + 2.0 * float(np.min(self.quad, initial=0.0))

    @property
    def is_free(self) -> bool:
        if self.free is None:
            self.free = bool(np.all(np.isinf(self.lo)) and np.all(np.isinf(self.hi)))
        return self.free


@dataclass
class SubsolverResult:
    solution: np.ndarray
    iterations: int
    pg_norm: float
    status: str  # "optimal" | "max_iter" | "numerical"


def assemble(group: ConstraintGroup, rho: float, dual: np.ndarray, coupling_target: np.ndarray,
             bounded: bool = True) -> Subproblem:
    """Build the subproblem for one group at the current iterate.

    ``coupling_target`` is z - lambda on the resource side and x + lambda on
    the demand side (both restricted to the group's coordinates); ``dual`` is
    the group's scaled multiplier.  With ``bounded=False`` the domain is
    dropped, which is how demand-side subproblems are solved.
    """
    q = group.lin + rho * (group.rmatmul(dual - group.b) - coupling_target)
    if bounded:
        lo, hi = group.lo, group.hi
        free = group.cache.get("domain_free")
        if free is None:
            free = bool(np.all(np.isinf(lo)) and np.all(np.isinf(hi)))
            group.cache["domain_free"] = free
    else:
        lo = np.full(group.dim, -math.inf)
        hi = np.full(group.dim, math.inf)
        free = True
    return Subproblem(
        quad=group.quad,
        M=group.gram_plus_identity(),
        rho=rho,
        q=q,
        logs=group.logs,
        lo=lo,
        hi=hi,
        cache=group.cache,
        gram_norm=group.gram_norm(),
        replica=group.replica,
        free=free,
    )


def subproblem_value(sp: Subproblem, v: np.ndarray) -> float:
    """Objective value of the subproblem at v (no constant terms)."""
    val = 0.5 * float(v @ sp.qmatvec(v)) + float(sp.q @ v)
    for lt in sp.logs:
        s = float(lt.coeffs @ v) + lt.offset
        if s <= 0.0:
            return math.inf
        val -= lt.weight * math.log(s)
    return val


def _factorize(sp: Subproblem):
    key = ("factor", sp.rho)
    fac = sp.cache.get(key)
    if fac is None:
        Q = sp.Q
        if sps.issparse(Q):
            lu = spsla.splu(Q)
            fac = ("splu", lu)
        else:
            fac = ("chol", sla.cho_factor(Q, lower=True, check_finite=False))
        sp.cache[key] = fac
    return fac


def _solve_factored(fac, rhs: np.ndarray) -> np.ndarray:
    kind, f = fac
    if kind == "splu":
        return f.solve(rhs)
    return sla.cho_solve(f, rhs, check_finite=False)


def _solve_direct(sp: Subproblem) -> SubsolverResult:
    fac = _factorize(sp)
    v = _solve_factored(fac, -sp.q)
    pg = float(np.linalg.norm(sp.qmatvec(v) + sp.q))
    return SubsolverResult(v, 1, pg, "optimal")


def _solve_log_free(sp: Subproblem, tol: float) -> Optional[SubsolverResult]:
    """Exact minimizer with log terms on a free domain.

    Writing theta_t = w_t / (c_t' v + o_t), stationarity gives
    v = Q^{-1}(C' theta - q) and a small square system for theta:
    theta .* (M theta - mvec) = w with M = C Q^{-1} C'.
    """
    fac = _factorize(sp)
    C = np.array([lt.coeffs for lt in sp.logs])
    w = np.array([lt.weight for lt in sp.logs])
    off = np.array([lt.offset for lt in sp.logs])
    Y = np.column_stack([_solve_factored(fac, C[t]) for t in range(C.shape[0])])
    y0 = _solve_factored(fac, sp.q)
    M = C @ Y
    mvec = C @ y0 - off

    if len(sp.logs) == 1:
        Mv, mv = float(M[0, 0]), float(mvec[0])
        theta = np.array([(mv + math.sqrt(mv * mv + 4.0 * Mv * w[0])) / (2.0 * Mv)])
        iters = 1
    else:
        diag = np.diag(M)
        theta = (mvec + np.sqrt(mvec**2 + 4.0 * diag * w)) / (2.0 * diag)
        scale = max(1.0, float(np.max(np.abs(w))))
        iters = 0
        for iters in range(1, NEWTON_MAX_STEPS + 1):
            s = M @ theta - mvec
            F = theta * s - w
            if float(np.max(np.abs(F))) <= NEWTON_TOL * scale:
                break
            J = np.diag(s) + theta[:, None] * M
            try:
                delta = np.linalg.solve(J, -F)
            except np.linalg.LinAlgError:
                return None
            eta = 1.0
            while eta > 1e-12:
                cand = theta + eta * delta
                if np.all(cand > 0) and np.all(M @ cand - mvec > 0):
                    break
                eta *= 0.5
            else:
                return None
            theta = theta + eta * delta
        else:
            return None

    v = Y @ theta - y0
    g = sp.qmatvec(v) + sp.q
    for t, lt in enumerate(sp.logs):
        s = float(lt.coeffs @ v) + lt.offset
        if s <= 0.0:
            return None
        g -= (lt.weight / s) * lt.coeffs
    return SubsolverResult(v, iters, float(np.linalg.norm(g)), "optimal")


def _gradient(sp: Subproblem, v: np.ndarray) -> np.ndarray:
    g = sp.qmatvec(v) + sp.q
    for lt in sp.logs:
        s = float(lt.coeffs @ v) + lt.offset
        g -= (lt.weight / max(s, 1e-300)) * lt.coeffs
    return g


def _solve_fista(sp: Subproblem, tol: float, max_iter: int) -> SubsolverResult:
    """Monotone accelerated projected gradient for smooth box subproblems."""
    L = sp.lipschitz
    sigma = sp.strong_convexity
    kappa = max(L / sigma, 1.0)
    mom = (math.sqrt(kappa) - 1.0) / (math.sqrt(kappa) + 1.0)
    lo, hi = sp.lo, sp.hi
    matvec = sp.matvec_fn()
    q = sp.q
    invL = 1.0 / L
    mx, mn, sqrt = np.maximum, np.minimum, math.sqrt

    v = mn(mx(sp.warm if sp.warm is not None else np.zeros(sp.dim), lo), hi)
    g_v = matvec(v)
    g_v += q
    d = v - mn(mx(v - invL * g_v, lo), hi)
    pgn = L * sqrt(d @ d)
    if pgn <= tol:
        return SubsolverResult(v, 0, pgn, "optimal")
    f_v = 0.5 * (float(v @ g_v) + float(v @ q))
    y = v

    for it in range(1, max_iter + 1):
        g_y = matvec(y)
        g_y += q
        cand = mn(mx(y - invL * g_y, lo), hi)
        g_c = matvec(cand)
        g_c += q
        f_c = 0.5 * (float(cand @ g_c) + float(cand @ q))
        if f_c > f_v:
            # Fall back to a plain projected-gradient step from v.
            cand = mn(mx(v - invL * g_v, lo), hi)
            g_c = matvec(cand)
            g_c += q
            f_c = 0.5 * (float(cand @ g_c) + float(cand @ q))
        d = cand - mn(mx(cand - invL * g_c, lo), hi)
        pgn = L * sqrt(d @ d)
        y = cand + mom * (cand - v)
        v, f_v, g_v = cand, f_c, g_c
        if pgn <= tol:
            return SubsolverResult(v, it, pgn, "optimal")
    return SubsolverResult(v, max_iter, pgn, "max_iter")


def _solve_log_pg(sp: Subproblem, tol: float, max_iter: int) -> SubsolverResult:
    """Backtracking projected gradient for log terms over a bounded domain."""
    lo, hi = sp.lo, sp.hi
    v = np.clip(sp.warm if sp.warm is not None else np.zeros(sp.dim), lo, hi)
    for lt in sp.logs:
        s = float(lt.coeffs @ v) + lt.offset
        if s <= 1e-12:
            nz = float(lt.coeffs @ lt.coeffs)
            if nz > 0:
                v = np.clip(v + lt.coeffs * ((1e-6 - s) / nz), lo, hi)
    f = subproblem_value(sp, v)
    if not math.isfinite(f):
        return SubsolverResult(v, 0, math.inf, "numerical")
    step = 1.0 / sp.lipschitz
    pgn = math.inf
    for it in range(1, max_iter + 1):
        g = _gradient(sp, v)
        accepted = False
        while step > 1e-18:
            cand = np.clip(v - step * g, lo, hi)
            fc = subproblem_value(sp, cand)
            if math.isfinite(fc) and fc <= f:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            return SubsolverResult(v, it, pgn, "numerical")
        pgn = float(np.linalg.norm(v - cand)) / step
        v, f = cand, fc
        if pgn <= tol:
            return SubsolverResult(v, it, pgn, "optimal")
        step = min(step * 1.25, 1.0)
    return SubsolverResult(v, max_iter, pgn, "max_iter")


def _solve_replica(sp: Subproblem) -> SubsolverResult:
    """All coordinates are one scalar: minimize over that scalar directly."""
    J = sp.dim
    denom = 2.0 * float(np.sum(sp.quad)) + sp.rho * J
    tau = -float(np.sum(sp.q)) / denom
    tau = min(max(tau, float(np.max(sp.lo))), float(np.min(sp.hi)))
    v = np.full(J, tau)
    pg = abs(float(np.sum(sp.qmatvec(v) + sp.q)))
    return SubsolverResult(v, 1, pg, "optimal")


def solve_subproblem(sp: Subproblem, tol: float = 1e-6, max_iter: int = 2000) -> SubsolverResult:
    """Solve one subproblem to projected-gradient norm <= tol."""
    if sp.replica:
        return _solve_replica(sp)
    if sp.logs:
        if sp.is_free:
            res = _solve_log_free(sp, tol)
            if res is not None:
                return res
        return _solve_log_pg(sp, tol, max_iter)
    if sp.is_free:
        return _solve_direct(sp)
    return _solve_fista(sp, tol, max_iter)


def project_domain(v: np.ndarray, lo: np.ndarray, hi: np.ndarray, kind: np.ndarray) -> np.ndarray:
    """Project onto the per-coordinate domains.

    Continuous coordinates clamp; integers round half away from zero, then
    clamp; booleans threshold at 0.5.
    """
    out = np.clip(v, lo, hi)
    bmask = kind == KIND_BOOL
    if np.any(bmask):
        out[bmask] = np.where(out[bmask] >= 0.5, 1.0, 0.0)
    imask = kind == KIND_INT
    if np.any(imask):
        vals = out[imask]
        rounded = np.copysign(np.floor(np.abs(vals) + 0.5), vals) + 0.0
        out[imask] = np.clip(rounded, lo[imask], hi[imask])
    return out


def project_domain_spec(v: np.ndarray, domains) -> np.ndarray:
    """Convenience wrapper taking a sequence of VariableDomain objects."""
    lo = np.array([d.bounds()[0] for d in domains])
    hi = np.array([d.bounds()[1] for d in domains])
    kind = np.array(
        [KIND_BOOL if d.kind == "boolean" else KIND_INT if d.kind == "integer_box" else KIND_CONT for d in domains],
        dtype=np.uint8,
    )
    return project_domain(np.asarray(v, dtype=float), lo, hi, kind)
