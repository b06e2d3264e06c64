"""Independent ground-truth solvers for desk-scale verification.

Everything here trades speed for auditability: a dense two-phase tableau
simplex with Bland's rule, an exhaustive mixed-integer search, a projected
gradient bound for log-utility objectives, and monolithic minimizers of the
augmented Lagrangian that ignore the group decomposition entirely.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .canonical import CanonicalProblem
from .model import ObjectiveDomainError, ProblemSpec, eval_objective

__all__ = [
    "StandardFormLP",
    "SimplexResult",
    "MilpResult",
    "OracleUnsupportedError",
    "OracleSizeError",
    "simplex_solve",
    "lp_from_spec",
    "lp_from_canonical",
    "brute_force_milp",
    "solve_spec_lp",
    "joint_x_update_oracle",
    "joint_z_update_oracle",
    "log_utility_bound",
]

# Desk-scale contract for the dense simplex.
MAX_LP_NONZEROS = 2000
MAX_DISCRETE_COORDS = 20
MAX_MILP_NODES = 10_000_000

_PIVOT_TOL = 1e-10
_COST_TOL = 1e-9


class OracleUnsupportedError(ValueError):
    """Problem shape the oracle deliberately does not handle."""


class OracleSizeError(ValueError):
    """Instance exceeds the oracle's desk-scale limits."""


@dataclass
class StandardFormLP:
    """Dense LP: optimize c@x subject to A x (rel) b and lo <= x <= hi."""

    A: np.ndarray
    b: np.ndarray
    rel: list
    c: np.ndarray
    sense: str = "minimize"
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.asarray(self.b, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        p, nv = self.A.shape
        if self.lo is None:
            self.lo = np.zeros(nv)
        if self.hi is None:
            self.hi = np.full(nv, math.inf)
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if len(self.rel) != p or self.b.size != p or self.c.size != nv:
            raise ValueError("inconsistent LP dimensions")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.b))):
            raise ValueError("non-finite LP entries")


@dataclass
class SimplexResult:
    status: str  # "optimal" | "infeasible" | "unbounded"
    x: Optional[np.ndarray]
    objective: Optional[float]
    iterations: int = 0


def _pivot(T, obj, basis, row, col):
    T[row] = T[row] / T[row, col]
    colvals = T[:, col].copy()
    colvals[row] = 0.0
    T -= np.outer(colvals, T[row])
    if obj[col] != 0.0:
        obj -= obj[col] * T[row]
    basis[row] = col


def _bland_iterate(T, obj, basis, allowed, max_pivots=500_000):
    """Pivot until optimal or unbounded.

    Dantzig pricing for speed, switching to Bland's rule for a stretch
    whenever degenerate pivots stall progress; Bland is what guarantees
    termination.  Returns (status, pivot count).
    """
    p, ncols = T.shape[0], T.shape[1] - 1
    basis_arr = np.asarray(basis)
    count = 0
    stall = 0
    bland_until = 0
    while True:
        red = np.where(allowed, obj[:ncols], 0.0)
        if count < bland_until:
            cand = np.nonzero(red < -_COST_TOL)[0]
            if cand.size == 0:
                return "optimal", count
            enter = int(cand[0])
        else:
            enter = int(np.argmin(red))
            if red[enter] >= -_COST_TOL:
                return "optimal", count
        col = T[:, enter]
        pos = col > _PIVOT_TOL
        if not pos.any():
            return "unbounded", count
        ratios = np.full(p, math.inf)
        ratios[pos] = T[pos, -1] / col[pos]
        best = float(ratios.min())
        ties = np.nonzero(ratios <= best + 1e-12)[0]
        leave = int(ties[np.argmin(basis_arr[ties])])
        stall = stall + 1 if best <= 1e-12 else 0
        if stall > 40 and count >= bland_until:
            bland_until = count + 2000
            stall = 0
        _pivot(T, obj, basis, leave, enter)
        basis_arr[leave] = basis[leave]
        count += 1
        if count > max_pivots:
            raise RuntimeError("simplex pivot limit exceeded")


def simplex_solve(lp: StandardFormLP) -> SimplexResult:
    """Two-phase dense tableau simplex with Bland's anti-cycling rule."""
    nnz = int(np.count_nonzero(lp.A))
    if nnz > MAX_LP_NONZEROS:
        raise OracleSizeError(f"LP has {nnz} nonzeros, oracle limit is {MAX_LP_NONZEROS}")

    csign = 1.0 if lp.sense == "minimize" else -1.0
    p, nv = lp.A.shape

    # Substitute shifted / mirrored / split variables so every standard
    # column is nonnegative.  cols: (orig var, sign); shift: constant part.
    cols = []
    shift = np.zeros(nv)
    bound_rows = []  # (std col, ub) pending upper bounds
    for k in range(nv):
        lo, hi = lp.lo[k], lp.hi[k]
        if lo > hi:
            return SimplexResult("infeasible", None, None)
        if math.isinf(lo) and math.isinf(hi):
            cols.append((k, 1.0))
            cols.append((k, -1.0))
        elif not math.isinf(lo):
            shift[k] = lo
            cols.append((k, 1.0))
            if not math.isinf(hi):
                bound_rows.append((len(cols) - 1, hi - lo))
        else:
            shift[k] = hi
            cols.append((k, -1.0))

    ns = len(cols)
    A2 = np.zeros((p + len(bound_rows), ns))
    for idx, (k, s) in enumerate(cols):
        A2[:p, idx] = s * lp.A[:, k]
    b2 = lp.b - lp.A @ shift
    rel2 = list(lp.rel)
    for r, (cidx, ub) in enumerate(bound_rows):
        A2[p + r, cidx] = 1.0
        rel2.append("<=")
    b2 = np.concatenate([b2, [ub for _, ub in bound_rows]])
    c2 = np.array([s * csign * lp.c[k] for k, s in cols])
    offset = csign * float(lp.c @ shift)

    # Normalize rows so the rhs is nonnegative.
    for r in range(b2.size):
        if b2[r] < 0:
            A2[r] = -A2[r]
            b2[r] = -b2[r]
            rel2[r] = {"<=": ">=", ">=": "<=", "==": "=="}[rel2[r]]

    p2 = b2.size
    slack_cols, art_cols = [], []
    extra = []
    basis = [-1] * p2
    for r in range(p2):
        if rel2[r] == "<=":
            col = np.zeros(p2)
            col[r] = 1.0
            extra.append(col)
            basis[r] = ns + len(extra) - 1
            slack_cols.append(ns + len(extra) - 1)
        elif rel2[r] == ">=":
            col = np.zeros(p2)
            col[r] = -1.0
            extra.append(col)
            slack_cols.append(ns + len(extra) - 1)
    for r in range(p2):
        if basis[r] < 0:
            col = np.zeros(p2)
            col[r] = 1.0
            extra.append(col)
            basis[r] = ns + len(extra) - 1
            art_cols.append(ns + len(extra) - 1)

    ncols = ns + len(extra)
    T = np.zeros((p2, ncols + 1))
    T[:, :ns] = A2
    for idx, col in enumerate(extra):
        T[:, ns + idx] = col
    T[:, -1] = b2

    art_set = set(art_cols)
    allowed = np.ones(ncols, dtype=bool)
    iters = 0

    if art_cols:
        obj1 = np.zeros(ncols + 1)
        for j in art_cols:
            obj1[j] = 1.0
        for r in range(p2):
            if basis[r] in art_set:
                obj1 -= T[r]
        status, n1 = _bland_iterate(T, obj1, basis, allowed)
        iters += n1
        if -obj1[-1] > 1e-7 * max(1.0, float(np.max(np.abs(b2))) if b2.size else 1.0):
            return SimplexResult("infeasible", None, None, iters)
        # Pivot leftover artificials out of the basis (degenerate rows).
        for r in range(p2):
            if basis[r] in art_set:
                piv = -1
                for j in range(ncols):
                    if j not in art_set and abs(T[r, j]) > 1e-9:
                        piv = j
                        break
                if piv >= 0:
                    _pivot(T, obj1, basis, r, piv)
                    iters += 1
                # else: redundant row; harmless to keep with artificial at 0.
        for j in art_cols:
            allowed[j] = False

    obj2 = np.zeros(ncols + 1)
    obj2[:ns] = c2
    for r in range(p2):
        if obj2[basis[r]] != 0.0:
            obj2 -= obj2[basis[r]] * T[r]
    status, n2 = _bland_iterate(T, obj2, basis, allowed)
    iters += n2
    if status == "unbounded":
        return SimplexResult("unbounded", None, None, iters)

    xstd = np.zeros(ncols)
    for r in range(p2):
        xstd[basis[r]] = T[r, -1]
    x = shift.copy()
    for idx, (k, s) in enumerate(cols):
        x[k] += s * xstd[idx]
    minimized = float(obj2[-1]) * -1.0 + offset
    return SimplexResult("optimal", x, csign * minimized, iters)


@dataclass
class SpecLP:
    """LP view of a ProblemSpec plus the bookkeeping to map solutions back."""

    lp: StandardFormLP
    var_of_entry: dict
    t_col: Optional[int]
    fixed: dict
    problem: ProblemSpec

    def allocation(self, xvec: np.ndarray) -> np.ndarray:
        n, m = self.problem.n_resources, self.problem.n_demands
        out = np.zeros((n, m))
        for (i, j), v in self.fixed.items():
            out[i, j] = v
        for (i, j), col in self.var_of_entry.items():
            out[i, j] = xvec[col]
        return out


def lp_from_spec(problem: ProblemSpec, fixed: Optional[dict] = None) -> SpecLP:
    """Flatten a linear (optionally epigraph) problem into a dense LP.

    ``fixed`` pins selected entries to constants (used by the MILP search).
    Epigraph objectives get a single auxiliary variable bounded by the
    utility rows, independent of the consensus replication used by the
    canonical pipeline.
    """
    fixed = dict(fixed or {})
    epi_terms = [t for t in problem.objective_terms if t.kind in ("epigraph_min", "epigraph_max")]
    if any(t.kind in ("weighted_log", "quadratic") for t in problem.objective_terms):
        raise OracleUnsupportedError("LP oracle supports linear and epigraph objectives only")
    if len(epi_terms) > 1:
        raise OracleUnsupportedError("at most one epigraph term")

    n, m = problem.n_resources, problem.n_demands
    grid = problem.domain_grid()
    var_of_entry = {}
    lo, hi = [], []
    for i in range(n):
        for j in range(m):
            if (i, j) in fixed:
                continue
            dlo, dhi = grid[i][j].bounds()
            if dlo == dhi:
                fixed[(i, j)] = dlo
                continue
            var_of_entry[(i, j)] = len(lo)
            lo.append(dlo)
            hi.append(dhi)

    t_col = None
    if epi_terms:
        t_col = len(lo)
        lo.append(-math.inf)
        hi.append(math.inf)

    nv = len(lo)
    c = np.zeros(nv)
    for t in problem.objective_terms:
        if t.kind == "linear":
            for (i, j), w in t.weights:
                if (i, j) in var_of_entry:
                    c[var_of_entry[(i, j)]] += w
    if t_col is not None:
        c[t_col] += 1.0

    rows, rhs, rel = [], [], []

    def add_constraint(coeffs, relation, r):
        row = np.zeros(nv)
        const = 0.0
        for (i, j), v in coeffs:
            if (i, j) in fixed:
                const += v * fixed[(i, j)]
            elif (i, j) in var_of_entry:
                row[var_of_entry[(i, j)]] += v
        rows.append(row)
        rhs.append(r - const)
        rel.append(relation)

    for con in problem.resource_constraints:
        add_constraint(con.coeffs, con.rel, con.rhs)
    for con in problem.demand_constraints:
        add_constraint(con.coeffs, con.rel, con.rhs)

    if epi_terms:
        term = epi_terms[0]
        relation = ">=" if term.kind == "epigraph_min" else "<="
        for u in term.utilities:
            row = np.zeros(nv)
            const = 0.0
            for (i, j), v in u.coeffs:
                if (i, j) in fixed:
                    const += v * fixed[(i, j)]
                elif (i, j) in var_of_entry:
                    row[var_of_entry[(i, j)]] += v
            row[t_col] = -1.0
            rows.append(row)
            rhs.append(-const)
            rel.append(relation)

    A = np.vstack(rows) if rows else np.zeros((0, nv))
    lp = StandardFormLP(A, np.array(rhs), rel, c, problem.sense, np.array(lo), np.array(hi))
    return SpecLP(lp, var_of_entry, t_col, fixed, problem)


def solve_spec_lp(problem: ProblemSpec, fixed: Optional[dict] = None):
    """Simplex on the flattened problem; returns (result, allocation or None)."""
    spec_lp = lp_from_spec(problem, fixed)
    res = simplex_solve(spec_lp.lp)
    if res.status != "optimal":
        return res, None
    alloc = spec_lp.allocation(res.x)
    # Report the exact objective of the recovered allocation, constants included.
    fixed_obj = 0.0
    for t in problem.objective_terms:
        if t.kind == "linear":
            for (i, j), w in t.weights:
                if (i, j) in spec_lp.fixed:
                    fixed_obj += w * spec_lp.fixed[(i, j)]
    res = SimplexResult(res.status, res.x, res.objective + fixed_obj, res.iterations)
    return res, alloc


def lp_from_canonical(canonical: CanonicalProblem) -> StandardFormLP:
    """Single-copy LP over the augmented vector (x == z collapsed)."""
    N = canonical.n_active
    lin = np.zeros(N)
    for g in canonical.resource_groups + canonical.demand_groups:
        if g.logs or np.any(g.quad != 0.0):
            raise OracleUnsupportedError("canonical LP view requires a linear objective")
        lin[g.coords] += g.lin
    rows, rhs = [], []
    for g in canonical.resource_groups + canonical.demand_groups:
        if g.replica:
            # Structural replicas become explicit ties in the flat LP view.
            hub = g.coords[0]
            for cid in g.coords[1:]:
                row = np.zeros(N)
                row[hub] = 1.0
                row[cid] = -1.0
                rows.append(row)
                rhs.append(0.0)
        if g.n_constraints == 0:
            continue
        A = g.A.toarray() if hasattr(g.A, "toarray") else g.A
        for r in range(g.n_constraints):
            row = np.zeros(N)
            row[g.coords] = A[r]
            rows.append(row)
            rhs.append(g.b[r])
    A = np.vstack(rows) if rows else np.zeros((0, N))
    rel = ["=="] * len(rhs)
    return StandardFormLP(A, np.array(rhs), rel, lin, "minimize", canonical.lo.copy(), canonical.hi.copy())


@dataclass
class MilpResult:
    status: str  # "optimal" | "infeasible"
    x: Optional[np.ndarray]
    objective: Optional[float]
    nodes: int = 0


def brute_force_milp(problem: ProblemSpec, value_grid: Optional[dict] = None) -> MilpResult:
    """Exhaustive search over discrete coordinates, simplex on the rest.

    Global optimum for the gridded problem; deliberately not branch-and-bound.
    """
    grid = problem.domain_grid()
    discrete = []
    for i in range(problem.n_resources):
        for j in range(problem.n_demands):
            dom = grid[i][j]
            if dom.is_discrete:
                if value_grid and (i, j) in value_grid:
                    vals = tuple(value_grid[(i, j)])
                elif dom.kind == "boolean":
                    vals = (0.0, 1.0)
                else:
                    vals = tuple(float(v) for v in range(int(dom.lo), int(dom.hi) + 1))
                discrete.append(((i, j), vals))
    if len(discrete) > MAX_DISCRETE_COORDS:
        raise OracleSizeError(f"{len(discrete)} discrete coordinates exceed the cap of {MAX_DISCRETE_COORDS}")
    total = 1
    for _, vals in discrete:
        total *= len(vals)
        if total > MAX_MILP_NODES:
            raise OracleSizeError(f"search space exceeds {MAX_MILP_NODES} nodes")

    if not discrete:
        res, alloc = solve_spec_lp(problem)
        if res.status != "optimal":
            return MilpResult("infeasible", None, None, 1)
        return MilpResult("optimal", alloc, res.objective, 1)

    keys = [k for k, _ in discrete]
    key_set = set(keys)
    sign = problem.min_sign

    # When the objective touches only the discrete coordinates, patterns can
    # be visited in objective order and the first feasible one is optimal.
    obj_on_discrete_only = all(
        t.kind == "linear" and all((e in key_set) or w == 0.0 for e, w in t.weights)
        for t in problem.objective_terms
    )

    lin_cost = {}
    for t in problem.objective_terms:
        if t.kind == "linear":
            for e, w in t.weights:
                lin_cost[e] = lin_cost.get(e, 0.0) + w

    def pattern_cost(assign):
        return sum(lin_cost.get(k, 0.0) * v for k, v in zip(keys, assign))

    patterns = itertools.product(*(vals for _, vals in discrete))
    if obj_on_discrete_only:
        patterns = sorted(patterns, key=lambda a: sign * pattern_cost(a))

    best = None
    nodes = 0
    for assign in patterns:
        nodes += 1
        fixed = dict(zip(keys, assign))
        res, alloc = solve_spec_lp(problem, fixed)
        if res.status != "optimal":
            continue
        if obj_on_discrete_only:
            return MilpResult("optimal", alloc, res.objective, nodes)
        if best is None or sign * res.objective < sign * best[1]:
            best = (alloc, res.objective)
    if best is None:
        return MilpResult("infeasible", None, None, nodes)
    return MilpResult("optimal", best[0], best[1], nodes)


# ---------------------------------------------------------------------------
# Monolithic augmented-Lagrangian minimizers (decomposition certificates).
# Written directly against the grouped constraint data, with their own
# projected-gradient loop; no subproblem machinery is reused here.
# ---------------------------------------------------------------------------


def _side_data(canonical: CanonicalProblem, side: str):
    groups = canonical.resource_groups if side == "resource" else canonical.demand_groups
    N = canonical.n_active
    lin = np.zeros(N)
    quad = np.zeros(N)
    logs = []
    for g in groups:
        lin[g.coords] += g.lin
        quad[g.coords] += g.quad
        for lt in g.logs:
            full = np.zeros(N)
            full[g.coords] = lt.coeffs
            logs.append((lt.weight, full, lt.offset))
    return groups, lin, quad, logs


def _joint_minimize(canonical, duals, rho, target, side, lo, hi, tol, max_iter, start):
    """Accelerated projected gradient on the full Lagrangian block, no groups."""
    groups, lin, quad, logs = _side_data(canonical, side)

    def gradient(v):
        g = lin + 2.0 * quad * v + rho * (v - target)
        for grp, dual in zip(groups, duals):
            if grp.n_constraints == 0:
                continue
            r = grp.matmul(v[grp.coords]) - grp.b + dual
            g[grp.coords] += rho * grp.rmatmul(r)
        for w, coeffs, off in logs:
            s = float(coeffs @ v) + off
            g -= (w / s) * coeffs
        return g

    def value(v):
        val = float(lin @ v + quad @ (v * v)) + 0.5 * rho * float((v - target) @ (v - target))
        for grp, dual in zip(groups, duals):
            if grp.n_constraints == 0:
                continue
            r = grp.matmul(v[grp.coords]) - grp.b + dual
            val += 0.5 * rho * float(r @ r)
        for w, coeffs, off in logs:
            s = float(coeffs @ v) + off
            if s <= 0.0:
                return math.inf
            val -= w * math.log(s)
        return val

    L = rho * max(1.0, max((g.gram_norm() for g in groups), default=1.0)) + 2.0 * float(np.max(quad, initial=0.0))
    for w, coeffs, off in logs:
        # Local curvature guard; refined by the monotone/backtracking loop.
        L += w * float(coeffs @ coeffs)
    sigma = rho
    kappa = max(L / sigma, 1.0)
    mom = (math.sqrt(kappa) - 1.0) / (math.sqrt(kappa) + 1.0)

    replicas = [g.coords for g in groups if g.replica]

    def project(v):
        v = np.clip(v, lo, hi)
        for coords in replicas:
            v[coords] = v[coords].mean()
        return v

    v = project(start.copy())
    if logs:
        # Ensure strictly positive log arguments at the start.
        for w, coeffs, off in logs:
            s = float(coeffs @ v) + off
            if s <= 1e-12:
                nz = coeffs @ coeffs
                if nz > 0:
                    v = project(v + coeffs * ((1e-6 - s) / nz))
    f_v = value(v)
    y = v.copy()
    it = 0
    for it in range(1, max_iter + 1):
        g_y = gradient(y)
        cand = project(y - g_y / L)
        f_cand = value(cand)
        if not math.isfinite(f_cand) or f_cand > f_v + 1e-15 * (1 + abs(f_v)):
            g_v = gradient(v)
            step = 1.0 / L
            cand = project(v - step * g_v)
            f_cand = value(cand)
            while (not math.isfinite(f_cand) or f_cand > f_v) and step > 1e-18:
                step *= 0.5
                cand = project(v - step * g_v)
                f_cand = value(cand)
        g_c = gradient(cand)
        pg = (cand - project(cand - g_c / L)) * L
        pgn = float(np.linalg.norm(pg))
        y = cand + mom * (cand - v)
        v, f_v = cand, f_cand
        if pgn <= tol:
            break
    return v, it


def joint_x_update_oracle(canonical: CanonicalProblem, state, tol: float = 1e-8, max_iter: int = 200_000) -> np.ndarray:
    """Minimize the full Lagrangian over every x coordinate jointly."""
    if canonical.n_active > 200:
        raise OracleSizeError("joint oracle limited to 200 coordinates")
    target = state.z - state.lam
    start = np.clip(target, canonical.lo, canonical.hi)
    v, _ = _joint_minimize(
        canonical, state.alpha, state.rho, target, "resource",
        canonical.lo, canonical.hi, tol, max_iter, start,
    )
    return v


def joint_z_update_oracle(canonical: CanonicalProblem, state, tol: float = 1e-8, max_iter: int = 200_000) -> np.ndarray:
    """Minimize the full Lagrangian over every z coordinate jointly."""
    if canonical.n_active > 200:
        raise OracleSizeError("joint oracle limited to 200 coordinates")
    target = state.x + state.lam
    N = canonical.n_active
    free_lo = np.full(N, -math.inf)
    free_hi = np.full(N, math.inf)
    v, _ = _joint_minimize(
        canonical, state.beta, state.rho, target, "demand",
        free_lo, free_hi, tol, max_iter, target.copy(),
    )
    return v


def log_utility_bound(problem: ProblemSpec, tol: float = 1e-8, max_iter: int = 100_000):
    """High-accuracy optimum for log-utility maximization problems.

    Projected gradient ascent on the original variables with Dykstra
    projection onto the intersection of the box domain and the (sparse)
    half-space constraints.  Serves as the independent bound for
    proportional-fairness instances.
    """
    if problem.sense != "maximize":
        raise OracleUnsupportedError("log bound expects a maximization problem")
    n, m = problem.n_resources, problem.n_demands
    grid = problem.domain_grid()
    lo = np.array([[grid[i][j].bounds()[0] for j in range(m)] for i in range(n)])
    hi = np.array([[grid[i][j].bounds()[1] for j in range(m)] for i in range(n)])

    cons = []
    for con in list(problem.resource_constraints) + list(problem.demand_constraints):
        vec = np.zeros((n, m))
        for (i, j), c in con.coeffs:
            vec[i, j] = c
        nrm = float(np.sum(vec * vec))
        cons.append((vec, con.rel, con.rhs, nrm))

    log_terms = []
    lin = np.zeros((n, m))
    for t in problem.objective_terms:
        if t.kind == "weighted_log":
            vec = np.zeros((n, m))
            for (i, j), c in t.weights:
                vec[i, j] = c
            log_terms.append((t.weight, vec, t.eps_log))
        elif t.kind == "linear":
            for (i, j), c in t.weights:
                lin[i, j] += c
        else:
            raise OracleUnsupportedError(f"log bound cannot handle {t.kind} terms")
    if not log_terms:
        raise OracleUnsupportedError("no log terms present")

    scale_ref = max(1.0, float(np.max(np.abs([c[2] for c in cons]))) if cons else 1.0)

    # Each constraint as s*(g@v - h) <= 0 with s = +1 (<=, ==) or -1 (>=);
    # equality rows carry a free multiplier.
    sgn = [(-1.0 if rel == ">=" else 1.0) for _, rel, _, _ in cons]
    is_eq = [rel == "==" for _, rel, _, _ in cons]

    def project_feasible(x0, sweeps=2000, cert_tol=1e-11):
        """Exact projection onto box ∩ half-spaces via dual coordinate ascent.

        Each sweep maximizes the projection dual one multiplier at a time
        (bisection on the clipped primal response); iteration stops on an
        explicit KKT certificate, not on iterate movement.
        """
        y = x0
        mu = np.zeros(len(cons))
        shift = np.zeros_like(y)  # sum of mu_k * s_k * g_k

        def primal():
            return np.clip(y - shift, lo, hi)

        def row_val(v, k):
            vec, _, rhs, _ = cons[k]
            return float(np.sum(vec * v)) - rhs

        for _ in range(sweeps):
            for k, (vec, rel, rhs, nrm) in enumerate(cons):
                s = sgn[k]
                shift -= mu[k] * s * vec
                mu[k] = 0.0
                if not is_eq[k] and s * row_val(primal(), k) <= 0.0:
                    continue  # inactive at zero multiplier

                def resid(m):
                    v = np.clip(y - shift - m * s * vec, lo, hi)
                    return s * (float(np.sum(vec * v)) - rhs)

                hi_m = 1.0
                while resid(hi_m) > 0.0 and hi_m < 1e12:
                    hi_m *= 2.0
                if is_eq[k]:
                    lo_m = -1.0
                    while resid(lo_m) < 0.0 and lo_m > -1e12:
                        lo_m *= 2.0
                else:
                    lo_m = 0.0
                for _ in range(80):
                    mid = 0.5 * (lo_m + hi_m)
                    if resid(mid) > 0.0:
                        lo_m = mid
                    else:
                        hi_m = mid
                mu[k] = 0.5 * (lo_m + hi_m)
                shift += mu[k] * s * vec
            v = primal()
            ok = True
            for k, (vec, rel, rhs, nrm) in enumerate(cons):
                r = row_val(v, k)
                if rel == "<=":
                    viol, comp = max(0.0, r), abs(mu[k] * r)
                elif rel == ">=":
                    viol, comp = max(0.0, -r), abs(mu[k] * r)
                else:
                    viol, comp = abs(r), 0.0
                if viol > cert_tol * scale_ref or comp > cert_tol * scale_ref * (1.0 + mu[k]):
                    ok = False
                    break
            if ok:
                break
        return v

    # Strictly feasible interior start: tiny uniform allocation.
    x = project_feasible(np.full((n, m), 1e-3))
    for w, vec, _ in log_terms:
        if float(np.sum(vec * x)) <= 0:
            x = project_feasible(x + 1e-4 * vec)

    def fval(x):
        v = float(np.sum(lin * x))
        for w, vec, _ in log_terms:
            s = float(np.sum(vec * x))
            if s <= 0:
                return -math.inf
            v += w * math.log(s)
        return v

    def grad(x):
        g = lin.copy()
        for w, vec, _ in log_terms:
            s = float(np.sum(vec * x))
            g += (w / s) * vec
        return g

    def local_step(xp):
        # Inverse curvature of the log terms at the current point; the
        # gradient-mapping stopping measure is evaluated at this scale.
        lsq = sum(
            w * float(np.sum(vec * vec)) / max(float(np.sum(vec * xp)), 1e-9) ** 2
            for w, vec, _ in log_terms
        )
        return 1.0 / max(lsq, 1e-12)

    f = fval(x)
    step = local_step(x)
    it = 0
    for it in range(1, max_iter + 1):
        g = grad(x)
        accepted = False
        while step > 1e-18:
            cand = project_feasible(x + step * g)
            fc = fval(cand)
            if fc >= f - 1e-18:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        move = float(np.linalg.norm(cand - x))
        x, f = cand, fc
        step_ref = local_step(x)
        if move / step <= tol:
            ref = project_feasible(x + step_ref * g)
            if float(np.linalg.norm(ref - x)) / step_ref <= tol:
                break
        step = min(step * 1.3, step_ref)
    return f, x, it
