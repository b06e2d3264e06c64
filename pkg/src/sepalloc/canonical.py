"""Canonicalization: equality form, epigraph rewrite, disjoint groups.

The canonical problem works on an augmented coordinate vector containing the
active matrix entries plus one nonnegative slack per inequality.  Entries
whose domain pins them to a single value are substituted out.  Resource-side
constraints are collected into groups that partition the rows; demand-side
constraints into groups that partition the columns.  Both the x-iterate and
the z-iterate live on the full augmented vector: demand slacks receive their
sign constraint on the x side, resource slacks are unconstrained on the z
side, and the elementwise coupling ties the two copies together.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sps

from .model import (
    DEFAULT_EPS_LOG,
    EpigraphUtility,
    InvalidProblemError,
    LinearConstraint,
    ObjectiveTerm,
    ProblemSpec,
    VariableDomain,
    build_problem,
)

__all__ = [
    "CanonicalProblem",
    "ConstraintGroup",
    "EpigraphInfo",
    "LogTerm",
    "ParameterPatternError",
    "canonicalize",
    "epigraph_transform",
    "to_equality_form",
    "group_constraints",
    "update_parameters",
]

# Dense equality systems below this many variables, sparse above.
DENSE_GROUP_LIMIT = 64

KIND_CONT = 0
KIND_BOOL = 1
KIND_INT = 2


class ParameterPatternError(ValueError):
    """Raised when a parameter refresh changes the sparsity structure."""

    def __init__(self, message, diff=None):
        super().__init__(message)
        self.diff = diff or []


@dataclass
class LogTerm:
    """Minimized-form log utility: ``-weight * log(coeffs @ v + offset)``."""

    weight: float
    coeffs: np.ndarray
    offset: float = 0.0


class ConstraintGroup:
    """One disjoint per-resource or per-demand equality system.

    ``coords`` are the indices of the group's variables in the augmented
    vector; ``A`` (one row per constraint) is dense for small groups and CSR
    above DENSE_GROUP_LIMIT variables.
    """

    def __init__(self, side, members, coords, A, b, lin, quad, logs, lo, hi, kind, src):
        self.side = side  # "resource" | "demand"
        self.members = tuple(members)
        self.coords = np.asarray(coords, dtype=np.int64)
        self.A = A
        self.b = np.asarray(b, dtype=float)
        self.lin = np.asarray(lin, dtype=float)
        self.quad = np.asarray(quad, dtype=float)
        self.logs = list(logs)
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.kind = np.asarray(kind, dtype=np.uint8)
        self.src = tuple(src)  # indices into the side's constraint list
        self.replica = False  # True: coords are one scalar written J times
        self.cache = {}  # per-solver caches keyed by the consumer

    @property
    def dim(self) -> int:
        return int(self.coords.size)

    @property
    def n_constraints(self) -> int:
        return int(self.b.size)

    def matmul(self, v: np.ndarray) -> np.ndarray:
        if self.n_constraints == 0:
            return np.zeros(0)
        return self.A @ v

    def rmatmul(self, r: np.ndarray) -> np.ndarray:
        if self.n_constraints == 0:
            return np.zeros(self.dim)
        return self.A.T @ r

    def gram_plus_identity(self):
        """A^T A + I, cached; the fixed part of the subproblem curvature."""
        M = self.cache.get("M")
        if M is None:
            if self.n_constraints == 0:
                M = sps.identity(self.dim, format="csr") if self.dim > DENSE_GROUP_LIMIT else np.eye(self.dim)
            elif sps.issparse(self.A):
                M = (self.A.T @ self.A + sps.identity(self.dim)).tocsr()
            else:
                M = self.A.T @ self.A + np.eye(self.dim)
            self.cache["M"] = M
        return M

    def gram_norm(self) -> float:
        """Power-iteration estimate of ||A^T A + I||, cached."""
        val = self.cache.get("M_norm")
        if val is None:
            M = self.gram_plus_identity()
            v = np.ones(self.dim) / math.sqrt(self.dim)
            v[:: 2] += 1e-3  # break symmetry deterministically
            v /= np.linalg.norm(v)
            val = 1.0
            for _ in range(20):
                w = M @ v
                nw = np.linalg.norm(w)
                if nw == 0.0:
                    break
                val = nw
                v = w / nw
            # Safety margin so 1/L steps never overshoot.
            val = float(val) * 1.01 + 1e-12
            self.cache["M_norm"] = val
        return val

    def invalidate(self):
        self.cache.clear()


@dataclass(frozen=True)
class EpigraphInfo:
    """Where the epigraph scalar's replicated copies live after transform."""

    kind: str  # "epigraph_min" | "epigraph_max"
    axis: str  # "row": copies fill a virtual resource row; "col": virtual demand column
    index: int  # the virtual row or column index
    affected: tuple  # columns (axis=row) or rows (axis=col) holding a copy


@dataclass
class CanonicalProblem:
    """Equality-form, grouped problem over the augmented coordinate vector."""

    spec: ProblemSpec  # post-epigraph-transform
    original: ProblemSpec  # as handed in by the user
    epigraph: Optional[EpigraphInfo]
    n_active: int
    coord_names: list  # per coord: ("entry", i, j) | ("rslack", k) | ("dslack", k)
    entry_coord: dict  # (i, j) -> coord id, active entries only
    pinned: dict  # (i, j) -> fixed value
    lo: np.ndarray
    hi: np.ndarray
    kind: np.ndarray
    resource_groups: list
    demand_groups: list
    x_free: np.ndarray  # coords in no resource group (demand slacks)
    z_free: np.ndarray  # coords in no demand group (resource slacks)
    slack_layout: dict  # (side, constraint idx) -> coord id | None
    obj_const: float  # constant of the minimized objective from pinned entries
    row_scale: dict = field(default_factory=dict)  # (side, idx) -> equilibration divisor
    rhs_norm_sq: float = 0.0
    total_rows: int = 0

    @property
    def has_discrete(self) -> bool:
        return bool(np.any(self.kind != KIND_CONT))

    def _alloc_maps(self):
        maps = getattr(self, "_alloc_cache", None)
        if maps is None:
            n, m = self.original.n_resources, self.original.n_demands
            rows, cols, cids = [], [], []
            for (i, j), cid in sorted(self.entry_coord.items()):
                if i < n and j < m:
                    rows.append(i)
                    cols.append(j)
                    cids.append(cid)
            base = np.zeros((n, m))
            for (i, j), val in self.pinned.items():
                if i < n and j < m:
                    base[i, j] = val
            maps = (np.array(rows), np.array(cols), np.array(cids, dtype=np.int64), base)
            self._alloc_cache = maps
        return maps

    def allocation_from_vector(self, v: np.ndarray) -> np.ndarray:
        """Map an augmented vector back to the original allocation matrix."""
        rows, cols, cids, base = self._alloc_maps()
        out = base.copy()
        if rows.size:
            out[rows, cols] = v[cids]
        return out

    def fast_objective(self, v: np.ndarray):
        """Original-problem objective of an augmented vector (declared sense)."""
        ev = getattr(self, "_obj_cache", None)
        if ev is None:
            ev = _ObjectiveEvaluator(self)
            self._obj_cache = ev
        return ev(v)

    def vector_from_allocation(self, x: np.ndarray, slack_fill: float = 0.0) -> np.ndarray:
        """Embed an allocation matrix into the augmented vector.

        Epigraph copies receive the min/max utility value of ``x`` and slacks
        the residual of their inequality, so the equality systems hold
        whenever the original inequalities do.
        """
        v = np.full(self.n_active, slack_fill)
        for (i, j), cid in self.entry_coord.items():
            v[cid] = x[i, j] if (i < x.shape[0] and j < x.shape[1]) else 0.0
        if self.epigraph is not None:
            term = next(t for t in self.original.objective_terms if t.kind.startswith("epigraph"))
            vals = [u.value(x) for u in term.utilities]
            t_val = min(vals) if term.kind == "epigraph_min" else max(vals)
            info = self.epigraph
            keys = [(info.index, j) for j in info.affected] if info.axis == "row" else [
                (i, info.index) for i in info.affected
            ]
            for key in keys:
                if key in self.entry_coord:
                    v[self.entry_coord[key]] = t_val

        def entry_val(i, j):
            if (i, j) in self.entry_coord:
                return v[self.entry_coord[(i, j)]]
            return self.pinned.get((i, j), 0.0)

        for side, cons in (("resource", self.spec.resource_constraints), ("demand", self.spec.demand_constraints)):
            for k, con in enumerate(cons):
                cid = self.slack_layout.get((side, k))
                if cid is None:
                    continue
                val = sum(c * entry_val(i, j) for (i, j), c in con.coeffs)
                scale = self.row_scale.get((side, k), 1.0)
                v[cid] = ((con.rhs - val) if con.rel == "<=" else (val - con.rhs)) / scale
        return v

    def group_of_coord(self, side: str) -> np.ndarray:
        """Group index per coordinate, -1 for coords outside every group."""
        groups = self.resource_groups if side == "resource" else self.demand_groups
        out = np.full(self.n_active, -1, dtype=np.int64)
        for g, grp in enumerate(groups):
            out[grp.coords] = g
        return out


class _ObjectiveEvaluator:
    """Vectorized per-iteration objective of the original problem."""

    def __init__(self, canonical: "CanonicalProblem"):
        self.sense_sign = 1.0
        self.terms = []
        spec = canonical.original
        coord = canonical.entry_coord
        pinned = canonical.pinned

        def split(weights):
            cids, vals, const = [], [], 0.0
            for (i, j), c in weights:
                if (i, j) in coord:
                    cids.append(coord[(i, j)])
                    vals.append(c)
                else:
                    const += c * pinned.get((i, j), 0.0)
            return np.array(cids, dtype=np.int64), np.array(vals), const

        for t in spec.objective_terms:
            if t.kind in ("linear", "quadratic"):
                self.terms.append((t.kind,) + split(t.weights))
            elif t.kind == "weighted_log":
                cids, vals, const = split(t.weights)
                self.terms.append(("weighted_log", cids, vals, const, t.weight, t.eps_log))
            else:
                utils = [split(u.coeffs) for u in t.utilities]
                self.terms.append((t.kind, utils))

    def __call__(self, v: np.ndarray):
        total = 0.0
        for rec in self.terms:
            kind = rec[0]
            if kind == "linear":
                _, cids, vals, const = rec
                total += float(vals @ v[cids]) + const
            elif kind == "quadratic":
                _, cids, vals, const = rec
                total += float(vals @ (v[cids] ** 2)) + const
            elif kind == "weighted_log":
                _, cids, vals, const, w, eps = rec
                agg = float(vals @ v[cids]) + const
                if agg <= -eps:
                    return None
                total += w * math.log(max(agg, eps))
            else:
                vals = [float(uv @ v[uc]) + c for uc, uv, c in rec[1]]
                total += min(vals) if kind == "epigraph_min" else max(vals)
        return total


def _domain_kind_code(dom: VariableDomain) -> int:
    if dom.kind == "boolean":
        return KIND_BOOL
    if dom.kind == "integer_box":
        return KIND_INT
    return KIND_CONT


class _UnionFind:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def epigraph_transform(problem: ProblemSpec) -> ProblemSpec:
    """Rewrite a min/max objective with an auxiliary scalar.

    The scalar is replicated, one copy per affected row or column, living in
    a virtual row (min over columns) or virtual column (max over rows).  The
    returned spec is self-contained: explicit equalities tie the copies.
    The solve pipeline instead keeps the tie structural (the copies are one
    replicated coordinate, see ``canonicalize``), which is the same feasible
    set with the agreement left to the x=z coupling duals.
    """
    spec, info = epigraph_transform_with_info(problem)
    if info is None:
        return spec
    n, m = spec.n_resources, spec.n_demands
    if info.axis == "row":
        hub = info.affected[0]
        extra = [
            LinearConstraint({(info.index, hub): 1.0, (info.index, b): -1.0}, "==", 0.0)
            for b in info.affected[1:]
        ]
        rcons = tuple(spec.resource_constraints) + tuple(extra)
        dcons = spec.demand_constraints
    else:
        hub = info.affected[0]
        extra = [
            LinearConstraint({(hub, info.index): 1.0, (b, info.index): -1.0}, "==", 0.0)
            for b in info.affected[1:]
        ]
        dcons = tuple(spec.demand_constraints) + tuple(extra)
        rcons = spec.resource_constraints
    return build_problem(
        n_resources=n,
        n_demands=m,
        sense=spec.sense,
        objective_terms=spec.objective_terms,
        resource_constraints=rcons,
        demand_constraints=dcons,
        default_domain=spec.default_domain,
        domain_overrides=dict(spec.domain_overrides),
        allow_merge=spec.allow_merge,
        meta=spec.meta_dict() or None,
    )


def epigraph_transform_with_info(problem: ProblemSpec):
    epi_terms = [t for t in problem.objective_terms if t.kind in ("epigraph_min", "epigraph_max")]
    if not epi_terms:
        return problem, None
    if len(epi_terms) > 1:
        raise InvalidProblemError("at most one epigraph term is supported")
    term = epi_terms[0]
    axes = {u.axis for u in term.utilities}
    if len(axes) != 1:
        raise InvalidProblemError("epigraph over mixed rows and columns is unsupported")
    util_axis = axes.pop()

    if term.kind == "epigraph_min":
        if problem.sense != "maximize":
            raise InvalidProblemError("epigraph_min requires a maximization problem")
    else:
        if problem.sense != "minimize":
            raise InvalidProblemError("epigraph_max requires a minimization problem")

    n, m = problem.n_resources, problem.n_demands
    other_terms = [t for t in problem.objective_terms if t is not term]
    overrides = dict(problem.domain_overrides)

    if util_axis == "col":
        # Copies t_j fill virtual row n; consensus rows are row-local to it.
        affected = tuple(sorted({u.index for u in term.utilities}))
        new_n, new_m = n + 1, m
        for j in range(m):
            overrides[(n, j)] = VariableDomain.free() if j in affected else VariableDomain.box(0.0, 0.0)
        dcons = list(problem.demand_constraints)
        rel = ">=" if term.kind == "epigraph_min" else "<="
        for u in sorted(term.utilities, key=lambda u: u.index):
            coeffs = dict(u.coeffs)
            coeffs[(n, u.index)] = coeffs.get((n, u.index), 0.0) - 1.0
            dcons.append(LinearConstraint(coeffs, rel, 0.0))
        rcons = list(problem.resource_constraints)
        t_weights = {(n, j): 1.0 / len(affected) for j in affected}
        new_terms = other_terms + [ObjectiveTerm.linear(("row", n), t_weights)]
        info = EpigraphInfo(term.kind, "row", n, affected)
    else:
        # Copies t_i fill virtual column m; consensus rows are column-local.
        affected = tuple(sorted({u.index for u in term.utilities}))
        new_n, new_m = n, m + 1
        for i in range(n):
            overrides[(i, m)] = VariableDomain.free() if i in affected else VariableDomain.box(0.0, 0.0)
        rcons = list(problem.resource_constraints)
        rel = ">=" if term.kind == "epigraph_min" else "<="
        for u in sorted(term.utilities, key=lambda u: u.index):
            coeffs = dict(u.coeffs)
            coeffs[(u.index, m)] = coeffs.get((u.index, m), 0.0) - 1.0
            rcons.append(LinearConstraint(coeffs, rel, 0.0))
        dcons = list(problem.demand_constraints)
        t_weights = {(i, m): 1.0 / len(affected) for i in affected}
        new_terms = other_terms + [ObjectiveTerm.linear(("col", m), t_weights)]
        info = EpigraphInfo(term.kind, "col", m, affected)

    spec = build_problem(
        n_resources=new_n,
        n_demands=new_m,
        sense=problem.sense,
        objective_terms=new_terms,
        resource_constraints=rcons,
        demand_constraints=dcons,
        default_domain=problem.default_domain,
        domain_overrides=overrides,
        allow_merge=problem.allow_merge,
        meta=problem.meta_dict() or None,
    )
    return spec, info


def _build_canonical(spec: ProblemSpec, original: ProblemSpec, info) -> CanonicalProblem:
    n, m = spec.n_resources, spec.n_demands
    min_sign = spec.min_sign
    grid = spec.domain_grid()

    pinned = {}
    coord_names = []
    entry_coord = {}
    lo, hi, kind = [], [], []
    for i in range(n):
        for j in range(m):
            dom = grid[i][j]
            dlo, dhi = dom.bounds()
            if dlo == dhi:
                pinned[(i, j)] = dlo
                continue
            entry_coord[(i, j)] = len(coord_names)
            coord_names.append(("entry", i, j))
            lo.append(dlo)
            hi.append(dhi)
            kind.append(_domain_kind_code(dom))

    slack_layout = {}
    for side, cons in (("resource", spec.resource_constraints), ("demand", spec.demand_constraints)):
        for k, con in enumerate(cons):
            if con.rel == "==":
                slack_layout[(side, k)] = None
            else:
                cid = len(coord_names)
                slack_layout[(side, k)] = cid
                coord_names.append(("rslack" if side == "resource" else "dslack", k))
                lo.append(0.0)
                hi.append(math.inf)
                kind.append(KIND_CONT)

    n_active = len(coord_names)
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    kind = np.array(kind, dtype=np.uint8)

    # Minimized-sense objective, split by the side each term's target names:
    # row-targeted terms are f_i (x side), column-targeted terms g_j (z side).
    lin_r, quad_r = np.zeros(n_active), np.zeros(n_active)
    lin_c, quad_c = np.zeros(n_active), np.zeros(n_active)
    obj_const = 0.0
    row_logs: dict[int, list] = {}
    col_logs: dict[int, list] = {}

    for t in spec.objective_terms:
        axis, idx = t.target
        if t.kind in ("linear", "quadratic"):
            if t.kind == "linear":
                vec = lin_r if axis == "row" else lin_c
            else:
                vec = quad_r if axis == "row" else quad_c
            for (i, j), c in t.weights:
                w = min_sign * c
                if (i, j) in pinned:
                    pv = pinned[(i, j)]
                    obj_const += w * (pv if t.kind == "linear" else pv * pv)
                    continue
                vec[entry_coord[(i, j)]] += w
        elif t.kind == "weighted_log":
            # Minimized form is -w * log(agg), w > 0 after sense handling.
            w = -min_sign * t.weight
            coeff_ids, coeff_vals, off = [], [], 0.0
            for (i, j), c in t.weights:
                if (i, j) in pinned:
                    off += c * pinned[(i, j)]
                else:
                    coeff_ids.append(entry_coord[(i, j)])
                    coeff_vals.append(c)
            entry = (w, np.array(coeff_ids, dtype=np.int64), np.array(coeff_vals), off)
            if axis == "row":
                row_logs.setdefault(idx, []).append(entry)
            else:
                col_logs.setdefault(idx, []).append(entry)
        else:
            raise InvalidProblemError("epigraph terms must be transformed before canonicalization")

    row_scale: dict = {}

    def build_side(side: str):
        cons = spec.resource_constraints if side == "resource" else spec.demand_constraints
        n_axis = n if side == "resource" else m
        uf = _UnionFind(range(n_axis))
        touched = []
        for con in cons:
            axes = con.touched_rows() if side == "resource" else con.touched_cols()
            touched.append(axes)
            for a, b in zip(axes, axes[1:]):
                uf.union(a, b)
        comp_members: dict[int, list] = {}
        for a in range(n_axis):
            comp_members.setdefault(uf.find(a), []).append(a)
        comp_cons: dict[int, list] = {r: [] for r in comp_members}
        for k, axes in enumerate(touched):
            comp_cons[uf.find(axes[0])].append(k)

        groups = []
        for root in sorted(comp_members):
            members = sorted(comp_members[root])
            con_ids = comp_cons[root]
            coords = []
            for a in members:
                if side == "resource":
                    coords.extend(entry_coord[(a, j)] for j in range(m) if (a, j) in entry_coord)
                else:
                    coords.extend(entry_coord[(i, a)] for i in range(n) if (i, a) in entry_coord)
            for k in con_ids:
                cid = slack_layout[(side, k)]
                if cid is not None:
                    coords.append(cid)
            coords = np.array(sorted(coords), dtype=np.int64)
            pos = {cid: p for p, cid in enumerate(coords)}
            d = coords.size

            rows_i, cols_i, vals = [], [], []
            b = np.zeros(len(con_ids))
            for r, k in enumerate(con_ids):
                con = cons[k]
                # Equilibrate: divide the row by its largest coefficient so
                # heterogeneous units do not skew penalties or residuals.
                scale = max(abs(c) for _, c in con.coeffs if c != 0.0)
                row_scale[(side, k)] = scale
                rhs = con.rhs
                for (i, j), c in con.coeffs:
                    if (i, j) in pinned:
                        rhs -= c * pinned[(i, j)]
                        continue
                    rows_i.append(r)
                    cols_i.append(pos[entry_coord[(i, j)]])
                    vals.append(c / scale)
                scid = slack_layout[(side, k)]
                if scid is not None:
                    rows_i.append(r)
                    cols_i.append(pos[scid])
                    vals.append(1.0 if con.rel == "<=" else -1.0)
                b[r] = rhs / scale
            if d > DENSE_GROUP_LIMIT:
                A = sps.csr_matrix((vals, (rows_i, cols_i)), shape=(len(con_ids), d))
            else:
                A = np.zeros((len(con_ids), d))
                for r, cpos, v in zip(rows_i, cols_i, vals):
                    A[r, cpos] += v

            g_lin = (lin_r if side == "resource" else lin_c)[coords]
            g_quad = (quad_r if side == "resource" else quad_c)[coords]
            logs = []
            src_logs = row_logs if side == "resource" else col_logs
            for a in members:
                for w, ids, cv, off in src_logs.get(a, []):
                    dense = np.zeros(d)
                    for cid, c in zip(ids, cv):
                        dense[pos[cid]] = c
                    logs.append(LogTerm(w, dense, off))
            groups.append(
                ConstraintGroup(
                    side, members, coords, A, b, g_lin, g_quad, logs,
                    lo[coords], hi[coords], kind[coords], con_ids,
                )
            )
        return groups

    resource_groups = build_side("resource")
    demand_groups = build_side("demand")

    if info is not None:
        # The virtual axis holds one replicated scalar; its owning group is
        # solved over that scalar, which is what enforces consensus.
        side_groups = resource_groups if info.axis == "row" else demand_groups
        for g in side_groups:
            if g.members == (info.index,):
                if g.n_constraints:
                    raise InvalidProblemError("epigraph replica group cannot carry constraints")
                g.replica = True
                break
        else:
            raise InvalidProblemError("epigraph replica group missing after grouping")

    in_resource = np.zeros(n_active, dtype=bool)
    for g in resource_groups:
        in_resource[g.coords] = True
    in_demand = np.zeros(n_active, dtype=bool)
    for g in demand_groups:
        in_demand[g.coords] = True
    x_free = np.where(~in_resource)[0]
    z_free = np.where(~in_demand)[0]

    rhs_norm_sq = sum(float(g.b @ g.b) for g in resource_groups + demand_groups)
    total_rows = sum(g.n_constraints for g in resource_groups + demand_groups)

    return CanonicalProblem(
        spec=spec,
        original=original,
        epigraph=info,
        n_active=n_active,
        coord_names=coord_names,
        entry_coord=entry_coord,
        pinned=pinned,
        lo=lo,
        hi=hi,
        kind=kind,
        resource_groups=resource_groups,
        demand_groups=demand_groups,
        x_free=x_free,
        z_free=z_free,
        slack_layout=slack_layout,
        obj_const=obj_const,
        row_scale=row_scale,
        rhs_norm_sq=rhs_norm_sq,
        total_rows=total_rows,
    )


def to_equality_form(problem: ProblemSpec) -> CanonicalProblem:
    """Slack-augment all inequalities and build the grouped canonical form.

    Epigraph terms must already be transformed (see ``canonicalize``).
    """
    return _build_canonical(problem, problem, None)


def group_constraints(canonical: CanonicalProblem) -> CanonicalProblem:
    """Recompute the disjoint constraint partition (idempotent)."""
    rebuilt = _build_canonical(canonical.spec, canonical.original, canonical.epigraph)
    return rebuilt


def canonicalize(problem: ProblemSpec) -> CanonicalProblem:
    """Full pipeline: epigraph transform, slack form, disjoint groups."""
    spec, info = epigraph_transform_with_info(problem)
    return _build_canonical(spec, problem, info)


def _pattern_diff(old: ProblemSpec, new: ProblemSpec) -> list:
    diff = []
    if (old.n_resources, old.n_demands) != (new.n_resources, new.n_demands):
        diff.append(f"shape {(old.n_resources, old.n_demands)} -> {(new.n_resources, new.n_demands)}")
    for side, a, b in (
        ("resource", old.resource_constraints, new.resource_constraints),
        ("demand", old.demand_constraints, new.demand_constraints),
    ):
        if len(a) != len(b):
            diff.append(f"{side} constraint count {len(a)} -> {len(b)}")
            continue
        for k, (ca, cb) in enumerate(zip(a, b)):
            if ca.rel != cb.rel:
                diff.append(f"{side} #{k} relation {ca.rel} -> {cb.rel}")
            ka = tuple(key for key, _ in ca.coeffs)
            kb = tuple(key for key, _ in cb.coeffs)
            if ka != kb:
                diff.append(f"{side} #{k} entries {list(ka)} -> {list(kb)}")
    if len(old.objective_terms) != len(new.objective_terms):
        diff.append(f"objective term count {len(old.objective_terms)} -> {len(new.objective_terms)}")
    else:
        for k, (ta, tb) in enumerate(zip(old.objective_terms, new.objective_terms)):
            if ta.kind != tb.kind or ta.target != tb.target:
                diff.append(f"term #{k} {ta.kind}@{ta.target} -> {tb.kind}@{tb.target}")
            elif tuple(key for key, _ in ta.weights) != tuple(key for key, _ in tb.weights):
                diff.append(f"term #{k} weight pattern changed")
    if old.domain_overrides != new.domain_overrides or old.default_domain != new.default_domain:
        diff.append("variable domains changed")
    return diff


def update_parameters(canonical: CanonicalProblem, new_problem: ProblemSpec) -> CanonicalProblem:
    """Refresh rhs vectors and objective weights in place.

    The new problem must match the original sparsity pattern; group
    structure, slack layout and epigraph records are reused unchanged.
    """
    new_spec, new_info = epigraph_transform_with_info(new_problem)
    if (canonical.epigraph is None) != (new_info is None) or (
        canonical.epigraph is not None and canonical.epigraph != new_info
    ):
        raise ParameterPatternError("epigraph structure changed", ["epigraph record"])
    diff = _pattern_diff(canonical.spec, new_spec)
    if diff:
        raise ParameterPatternError("parameter refresh changed the sparsity pattern", diff)

    fresh = _build_canonical(new_spec, new_problem, new_info)
    for old_g, new_g in zip(
        canonical.resource_groups + canonical.demand_groups,
        fresh.resource_groups + fresh.demand_groups,
    ):
        if old_g.dim != new_g.dim or old_g.src != new_g.src:
            raise ParameterPatternError("group structure changed under refresh", ["group layout"])
        coeffs_changed = not _same_matrix(old_g.A, new_g.A)
        old_g.b = new_g.b
        old_g.lin = new_g.lin
        old_g.quad = new_g.quad
        old_g.logs = new_g.logs
        if coeffs_changed:
            old_g.A = new_g.A
            old_g.invalidate()
    canonical.spec = new_spec
    canonical.original = new_problem
    canonical.obj_const = fresh.obj_const
    canonical.row_scale = fresh.row_scale
    canonical.rhs_norm_sq = fresh.rhs_norm_sq
    if hasattr(canonical, "_obj_cache"):
        del canonical._obj_cache
    return canonical


def _same_matrix(a, b) -> bool:
    if sps.issparse(a) != sps.issparse(b):
        return False
    if sps.issparse(a):
        if a.shape != b.shape:
            return False
        return (a != b).nnz == 0
    return a.shape == b.shape and np.array_equal(a, b)


def validate_partition(canonical: CanonicalProblem) -> None:
    """Structural invariants: groups partition rows/cols and cover constraints."""
    spec = canonical.spec
    for side, groups, n_axis, cons in (
        ("resource", canonical.resource_groups, spec.n_resources, spec.resource_constraints),
        ("demand", canonical.demand_groups, spec.n_demands, spec.demand_constraints),
    ):
        seen_axis = []
        seen_cons = []
        for g in groups:
            seen_axis.extend(g.members)
            seen_cons.extend(g.src)
        if sorted(seen_axis) != list(range(n_axis)):
            raise AssertionError(f"{side} groups do not partition the axis: {sorted(seen_axis)}")
        if sorted(seen_cons) != list(range(len(cons))):
            raise AssertionError(f"{side} groups do not cover all constraints")
    covered = set()
    for g in canonical.resource_groups:
        overlap = covered.intersection(g.coords.tolist())
        if overlap:
            raise AssertionError(f"resource groups overlap on coords {sorted(overlap)}")
        covered.update(g.coords.tolist())
    covered = set()
    for g in canonical.demand_groups:
        overlap = covered.intersection(g.coords.tolist())
        if overlap:
            raise AssertionError(f"demand groups overlap on coords {sorted(overlap)}")
        covered.update(g.coords.tolist())
