"""Declaration of separable resource-allocation problems.

A problem allocates ``n_resources`` resources to ``n_demands`` demands through
an allocation matrix ``x``.  Constraints are tagged as resource-side (rows) or
demand-side (columns); objective terms attach to a single row, a single
column, or are a global min/max epigraph term.  Problems serialize to the
``dede-problem/1`` JSON format.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

__all__ = [
    "DEFAULT_EPS_LOG",
    "VariableDomain",
    "LinearConstraint",
    "ObjectiveTerm",
    "EpigraphUtility",
    "ProblemSpec",
    "FeasibilityReport",
    "InvalidProblemError",
    "ObjectiveDomainError",
    "build_problem",
    "eval_objective",
    "check_feasibility",
    "serialize",
    "deserialize",
    "load_problem",
    "save_problem",
]

PROBLEM_FORMAT = "dede-problem/1"

# Floor inside log utilities; keeps log terms finite at zero allocations.
DEFAULT_EPS_LOG = 1e-9

_REL = ("<=", "==", ">=")


class InvalidProblemError(ValueError):
    """Raised when a problem fails structural validation.

    ``offender`` carries the index/description of the failing constraint or
    term so callers can surface a precise rejection.
    """

    def __init__(self, message: str, offender=None):
        super().__init__(message)
        self.offender = offender


class ObjectiveDomainError(ValueError):
    """Raised when an allocation lies outside a log term's domain."""


@dataclass(frozen=True)
class VariableDomain:
    """Domain of a single x entry.

    kind is one of ``nonnegative_real``, ``box``, ``boolean``,
    ``integer_box``.  ``lo``/``hi`` apply to box-like kinds; an infinite
    bound is allowed (``box(-inf, inf)`` encodes a free variable).
    """

    kind: str = "nonnegative_real"
    lo: float = 0.0
    hi: float = math.inf

    def __post_init__(self):
        if self.kind not in ("nonnegative_real", "box", "boolean", "integer_box"):
            raise InvalidProblemError(f"unknown domain kind {self.kind!r}")
        lo, hi = self.bounds()
        if lo > hi:
            raise InvalidProblemError(f"domain has lo={lo} > hi={hi}")

    @staticmethod
    def nonneg() -> "VariableDomain":
        return VariableDomain("nonnegative_real")

    @staticmethod
    def box(lo: float, hi: float) -> "VariableDomain":
        return VariableDomain("box", float(lo), float(hi))

    @staticmethod
    def boolean() -> "VariableDomain":
        return VariableDomain("boolean", 0.0, 1.0)

    @staticmethod
    def integer_box(lo: float, hi: float) -> "VariableDomain":
        return VariableDomain("integer_box", float(lo), float(hi))

    @staticmethod
    def free() -> "VariableDomain":
        return VariableDomain("box", -math.inf, math.inf)

    def bounds(self) -> tuple[float, float]:
        """Relaxed (continuous) bounds of the domain."""
        if self.kind == "nonnegative_real":
            return 0.0, math.inf
        if self.kind == "boolean":
            return 0.0, 1.0
        return self.lo, self.hi

    @property
    def is_discrete(self) -> bool:
        return self.kind in ("boolean", "integer_box")

    def violation(self, v: float) -> float:
        """Distance from v to the nearest admissible value."""
        lo, hi = self.bounds()
        clamped = min(max(v, lo), hi)
        if self.kind == "boolean":
            return abs(v - (1.0 if clamped >= 0.5 else 0.0))
        if self.kind == "integer_box":
            rounded = math.floor(abs(clamped) + 0.5) * (1 if clamped >= 0 else -1)
            rounded = min(max(rounded, lo), hi)
            return abs(v - rounded)
        return abs(v - clamped)

    def to_json(self) -> dict:
        d = {"kind": self.kind}
        if self.kind in ("box", "integer_box"):
            d["lo"] = None if math.isinf(self.lo) else self.lo
            d["hi"] = None if math.isinf(self.hi) else self.hi
        return d

    @staticmethod
    def from_json(d: Mapping) -> "VariableDomain":
        kind = d["kind"]
        if kind in ("box", "integer_box"):
            lo = d.get("lo")
            hi = d.get("hi")
            lo = -math.inf if lo is None else float(lo)
            hi = math.inf if hi is None else float(hi)
            return VariableDomain(kind, lo, hi)
        return VariableDomain(kind)


def _freeze_coeffs(coeffs) -> tuple[tuple[tuple[int, int], float], ...]:
    """Normalize a {(i, j): c} mapping (or pair iterable) to a sorted tuple."""
    if isinstance(coeffs, Mapping):
        items = coeffs.items()
    else:
        items = coeffs
    out = []
    for key, c in items:
        i, j = key
        c = float(c)
        if not math.isfinite(c):
            raise InvalidProblemError(f"non-finite coefficient at entry {(i, j)}")
        out.append(((int(i), int(j)), c))
    out.sort(key=lambda kc: kc[0])
    keys = [k for k, _ in out]
    if len(set(keys)) != len(keys):
        raise InvalidProblemError("duplicate entry in coefficient list")
    return tuple(out)


@dataclass(frozen=True)
class LinearConstraint:
    """Sparse linear constraint ``sum(c_ij * x_ij) rel rhs``."""

    coeffs: tuple  # sorted tuple of ((i, j), c)
    rel: str
    rhs: float

    def __post_init__(self):
        object.__setattr__(self, "coeffs", _freeze_coeffs(self.coeffs))
        if self.rel not in _REL:
            raise InvalidProblemError(f"unknown relation {self.rel!r}")
        if not math.isfinite(self.rhs):
            raise InvalidProblemError("non-finite rhs")
        if not any(c != 0.0 for _, c in self.coeffs):
            raise InvalidProblemError("constraint has no nonzero coefficient")
        object.__setattr__(self, "rhs", float(self.rhs))

    def touched_rows(self) -> tuple[int, ...]:
        return tuple(sorted({i for (i, _), c in self.coeffs if c != 0.0}))

    def touched_cols(self) -> tuple[int, ...]:
        return tuple(sorted({j for (_, j), c in self.coeffs if c != 0.0}))

    def value(self, x: np.ndarray) -> float:
        return float(sum(c * x[i, j] for (i, j), c in self.coeffs))

    def violation(self, x: np.ndarray) -> float:
        v = self.value(x)
        if self.rel == "<=":
            return max(0.0, v - self.rhs)
        if self.rel == ">=":
            return max(0.0, self.rhs - v)
        return abs(v - self.rhs)

    def to_json(self) -> dict:
        return {
            "entries": [[i, j, c] for (i, j), c in self.coeffs],
            "rel": self.rel,
            "rhs": self.rhs,
        }

    @staticmethod
    def from_json(d: Mapping) -> "LinearConstraint":
        return LinearConstraint(
            tuple(((int(i), int(j)), float(c)) for i, j, c in d["entries"]),
            d["rel"],
            float(d["rhs"]),
        )


@dataclass(frozen=True)
class EpigraphUtility:
    """One utility ``sum(c * x)`` compared against the epigraph scalar."""

    axis: str  # "row" | "col"
    index: int
    coeffs: tuple  # sorted ((i, j), c)

    def __post_init__(self):
        if self.axis not in ("row", "col"):
            raise InvalidProblemError(f"bad utility axis {self.axis!r}")
        object.__setattr__(self, "coeffs", _freeze_coeffs(self.coeffs))

    def value(self, x: np.ndarray) -> float:
        return float(sum(c * x[i, j] for (i, j), c in self.coeffs))


@dataclass(frozen=True)
class ObjectiveTerm:
    """One additive objective term.

    kinds:
      linear        sum(w_ij * x_ij), weights confined to the target row/col
      quadratic     sum(w_ij * x_ij^2), diagonal weights
      weighted_log  weight * log(sum(w_ij * x_ij)), aggregation in `weights`
      epigraph_min  min over utilities (global target)
      epigraph_max  max over utilities (global target)
    """

    kind: str
    target: tuple  # ("row", i) | ("col", j) | ("global", None)
    weights: tuple = ()
    weight: float = 1.0  # scalar multiplier for weighted_log
    eps_log: float = DEFAULT_EPS_LOG
    utilities: tuple = ()

    def __post_init__(self):
        if self.kind not in ("linear", "quadratic", "weighted_log", "epigraph_min", "epigraph_max"):
            raise InvalidProblemError(f"unknown objective kind {self.kind!r}")
        axis, idx = self.target
        if axis not in ("row", "col", "global"):
            raise InvalidProblemError(f"bad objective target {self.target!r}")
        object.__setattr__(self, "target", (axis, None if axis == "global" else int(idx)))
        object.__setattr__(self, "weights", _freeze_coeffs(self.weights))
        object.__setattr__(self, "utilities", tuple(self.utilities))

    @staticmethod
    def linear(target, weights) -> "ObjectiveTerm":
        return ObjectiveTerm("linear", target, weights)

    @staticmethod
    def quadratic(target, weights) -> "ObjectiveTerm":
        return ObjectiveTerm("quadratic", target, weights)

    @staticmethod
    def weighted_log(target, weights, weight=1.0, eps_log=DEFAULT_EPS_LOG) -> "ObjectiveTerm":
        return ObjectiveTerm("weighted_log", target, weights, weight=float(weight), eps_log=float(eps_log))

    @staticmethod
    def epigraph_min(utilities) -> "ObjectiveTerm":
        return ObjectiveTerm("epigraph_min", ("global", None), utilities=tuple(utilities))

    @staticmethod
    def epigraph_max(utilities) -> "ObjectiveTerm":
        return ObjectiveTerm("epigraph_max", ("global", None), utilities=tuple(utilities))

    def to_json(self) -> dict:
        d = {"kind": self.kind}
        axis, idx = self.target
        d["target"] = "global" if axis == "global" else [axis, idx]
        if self.kind in ("linear", "quadratic"):
            d["weights"] = [[i, j, c] for (i, j), c in self.weights]
        elif self.kind == "weighted_log":
            d["weights"] = [[i, j, c] for (i, j), c in self.weights]
            d["weight"] = self.weight
            d["eps_log"] = self.eps_log
        else:
            d["utilities"] = [
                {"axis": u.axis, "index": u.index, "coeffs": [[i, j, c] for (i, j), c in u.coeffs]}
                for u in self.utilities
            ]
        return d

    @staticmethod
    def from_json(d: Mapping) -> "ObjectiveTerm":
        t = d["target"]
        target = ("global", None) if t == "global" else (t[0], int(t[1]))
        kind = d["kind"]
        if kind in ("linear", "quadratic"):
            return ObjectiveTerm(kind, target, tuple(((int(i), int(j)), float(c)) for i, j, c in d["weights"]))
        if kind == "weighted_log":
            return ObjectiveTerm(
                kind,
                target,
                tuple(((int(i), int(j)), float(c)) for i, j, c in d["weights"]),
                weight=float(d.get("weight", 1.0)),
                eps_log=float(d.get("eps_log", DEFAULT_EPS_LOG)),
            )
        utils = tuple(
            EpigraphUtility(u["axis"], int(u["index"]), tuple(((int(i), int(j)), float(c)) for i, j, c in u["coeffs"]))
            for u in d["utilities"]
        )
        return ObjectiveTerm(kind, target, utilities=utils)


@dataclass(frozen=True)
class ProblemSpec:
    """A validated separable allocation problem.

    Immutable after build; safe to share read-only across worker threads.
    ``min_sign`` is +1 for declared minimization and -1 for maximization:
    the engine always minimizes ``min_sign * objective``.
    """

    n_resources: int
    n_demands: int
    sense: str
    objective_terms: tuple
    resource_constraints: tuple
    demand_constraints: tuple
    default_domain: VariableDomain = field(default_factory=VariableDomain.nonneg)
    domain_overrides: tuple = ()  # sorted ((i, j), VariableDomain)
    allow_merge: bool = False
    meta: tuple = ()  # optional ((key, json-value)) pairs, round-tripped

    @property
    def min_sign(self) -> float:
        return 1.0 if self.sense == "minimize" else -1.0

    def domain_of(self, i: int, j: int) -> VariableDomain:
        for (oi, oj), dom in self.domain_overrides:
            if (oi, oj) == (i, j):
                return dom
        return self.default_domain

    def domain_grid(self) -> list[list[VariableDomain]]:
        grid = [[self.default_domain] * self.n_demands for _ in range(self.n_resources)]
        for (i, j), dom in self.domain_overrides:
            grid[i][j] = dom
        return grid

    @property
    def has_discrete(self) -> bool:
        if self.default_domain.is_discrete:
            return True
        return any(dom.is_discrete for _, dom in self.domain_overrides)

    @property
    def has_epigraph(self) -> bool:
        return any(t.kind in ("epigraph_min", "epigraph_max") for t in self.objective_terms)

    def meta_dict(self) -> dict:
        return {k: v for k, v in self.meta}

    def to_json(self) -> dict:
        d = {
            "format": PROBLEM_FORMAT,
            "n_resources": self.n_resources,
            "n_demands": self.n_demands,
            "sense": self.sense,
            "domain": {
                "default": self.default_domain.to_json(),
                "overrides": [[i, j, dom.to_json()] for (i, j), dom in self.domain_overrides],
            },
            "objective": [t.to_json() for t in self.objective_terms],
            "resource_constraints": [c.to_json() for c in self.resource_constraints],
            "demand_constraints": [c.to_json() for c in self.demand_constraints],
        }
        if self.allow_merge:
            d["allow_merge"] = True
        if self.meta:
            d["meta"] = self.meta_dict()
        return d

    def content_hash(self) -> str:
        return hashlib.sha256(serialize(self).encode()).hexdigest()


def _check_constraint_side(con: LinearConstraint, side: str, idx: int, allow_merge: bool):
    rows = con.touched_rows()
    cols = con.touched_cols()
    if side == "resource":
        if len(rows) > 1 and not allow_merge:
            raise InvalidProblemError(
                f"resource constraint #{idx} touches rows {list(rows)} but merging is disabled",
                offender=("resource", idx, rows),
            )
    else:
        if len(cols) > 1 and not allow_merge:
            raise InvalidProblemError(
                f"demand constraint #{idx} touches columns {list(cols)} but merging is disabled",
                offender=("demand", idx, cols),
            )


def _check_entries_in_range(coeffs, n, m, what):
    for (i, j), _ in coeffs:
        if not (0 <= i < n and 0 <= j < m):
            raise InvalidProblemError(f"{what} references out-of-range entry {(i, j)}", offender=what)


def build_problem(
    n_resources: int,
    n_demands: int,
    sense: str,
    objective_terms: Sequence[ObjectiveTerm],
    resource_constraints: Sequence[LinearConstraint] = (),
    demand_constraints: Sequence[LinearConstraint] = (),
    default_domain: VariableDomain = None,
    domain_overrides: Optional[Mapping] = None,
    allow_merge: bool = False,
    meta: Optional[Mapping] = None,
) -> ProblemSpec:
    """Validate parts and assemble a ProblemSpec.

    Raises InvalidProblemError naming the offending constraint or term when
    the parts violate the separable structure.
    """
    n, m = int(n_resources), int(n_demands)
    if n < 1 or m < 1:
        raise InvalidProblemError("need n_resources >= 1 and n_demands >= 1")
    if sense not in ("minimize", "maximize"):
        raise InvalidProblemError(f"unknown sense {sense!r}")
    terms = tuple(objective_terms)
    if not terms:
        raise InvalidProblemError("empty objective")
    min_sign = 1.0 if sense == "minimize" else -1.0

    for k, t in enumerate(terms):
        axis, idx = t.target
        if t.kind in ("epigraph_min", "epigraph_max"):
            if axis != "global":
                raise InvalidProblemError(f"objective term #{k}: epigraph terms must be global", offender=k)
            if not t.utilities:
                raise InvalidProblemError(f"objective term #{k}: epigraph term with no utilities", offender=k)
            axes = {u.axis for u in t.utilities}
            if len(axes) > 1:
                raise InvalidProblemError(
                    f"objective term #{k}: epigraph over mixed rows and columns is unsupported", offender=k
                )
            for u in t.utilities:
                _check_entries_in_range(u.coeffs, n, m, f"objective term #{k} utility")
                bad = [e for (e, c) in u.coeffs if c != 0.0 and (e[0] != u.index if u.axis == "row" else e[1] != u.index)]
                if bad:
                    raise InvalidProblemError(
                        f"objective term #{k}: utility for {u.axis} {u.index} references entries {bad}", offender=k
                    )
            continue
        if axis == "global":
            raise InvalidProblemError(
                f"objective term #{k}: only epigraph terms may be global", offender=k
            )
        _check_entries_in_range(t.weights, n, m, f"objective term #{k}")
        stray = [
            e
            for (e, c) in t.weights
            if c != 0.0 and ((axis == "row" and e[0] != idx) or (axis == "col" and e[1] != idx))
        ]
        if stray:
            raise InvalidProblemError(
                f"objective term #{k} targets {axis} {idx} but references entries {stray}", offender=k
            )
        if t.kind == "weighted_log":
            if t.weight * -min_sign <= 0.0:
                # After sense normalization the term must read -w*log(u), w>0.
                raise InvalidProblemError(
                    f"objective term #{k}: log weight must be positive toward maximization", offender=k
                )
            if t.eps_log <= 0:
                raise InvalidProblemError(f"objective term #{k}: eps_log must be > 0", offender=k)
        if t.kind == "quadratic":
            if any(c * min_sign < 0 for _, c in t.weights):
                raise InvalidProblemError(
                    f"objective term #{k}: quadratic weights must be convex after sense normalization",
                    offender=k,
                )

    rcons = tuple(resource_constraints)
    dcons = tuple(demand_constraints)
    for idx, con in enumerate(rcons):
        _check_entries_in_range(con.coeffs, n, m, f"resource constraint #{idx}")
        _check_constraint_side(con, "resource", idx, allow_merge)
    for idx, con in enumerate(dcons):
        _check_entries_in_range(con.coeffs, n, m, f"demand constraint #{idx}")
        _check_constraint_side(con, "demand", idx, allow_merge)

    overrides = ()
    if domain_overrides:
        items = sorted(domain_overrides.items()) if isinstance(domain_overrides, Mapping) else sorted(domain_overrides)
        for (i, j), dom in items:
            if not (0 <= i < n and 0 <= j < m):
                raise InvalidProblemError(f"domain override references out-of-range entry {(i, j)}")
        overrides = tuple(((int(i), int(j)), dom) for (i, j), dom in items)

    meta_t = tuple(sorted(meta.items())) if meta else ()
    return ProblemSpec(
        n_resources=n,
        n_demands=m,
        sense=sense,
        objective_terms=terms,
        resource_constraints=rcons,
        demand_constraints=dcons,
        default_domain=default_domain or VariableDomain.nonneg(),
        domain_overrides=overrides,
        allow_merge=bool(allow_merge),
        meta=meta_t,
    )


def _term_value(term: ObjectiveTerm, x: np.ndarray) -> float:
    if term.kind == "linear":
        return float(sum(c * x[i, j] for (i, j), c in term.weights))
    if term.kind == "quadratic":
        return float(sum(c * x[i, j] ** 2 for (i, j), c in term.weights))
    if term.kind == "weighted_log":
        agg = float(sum(c * x[i, j] for (i, j), c in term.weights))
        if agg <= -term.eps_log:
            raise ObjectiveDomainError(
                f"log term on {term.target} has nonpositive aggregate {agg:.3e}"
            )
        return term.weight * math.log(max(agg, term.eps_log))
    vals = [u.value(x) for u in term.utilities]
    return min(vals) if term.kind == "epigraph_min" else max(vals)


def eval_objective(problem: ProblemSpec, x: np.ndarray) -> float:
    """Exact objective value of ``x`` in the problem's declared sense."""
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.n_resources, problem.n_demands):
        raise ValueError(f"allocation shape {x.shape} != {(problem.n_resources, problem.n_demands)}")
    return float(sum(_term_value(t, x) for t in problem.objective_terms))


@dataclass
class FeasibilityReport:
    """Max absolute violation per constraint class and the worst offenders."""

    resource_violation: float
    demand_violation: float
    domain_violation: float
    worst_resource: Optional[int]
    worst_demand: Optional[int]
    worst_domain: Optional[tuple]
    tol: float

    @property
    def max_violation(self) -> float:
        return max(self.resource_violation, self.demand_violation, self.domain_violation)

    @property
    def feasible(self) -> bool:
        return self.max_violation <= self.tol


def check_feasibility(problem: ProblemSpec, x: np.ndarray, tol: float = 1e-6) -> FeasibilityReport:
    """Report constraint and domain violations of an allocation matrix."""
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.n_resources, problem.n_demands):
        raise ValueError(f"allocation shape {x.shape} != {(problem.n_resources, problem.n_demands)}")
    rv, ri = 0.0, None
    for k, con in enumerate(problem.resource_constraints):
        v = con.violation(x)
        if v > rv:
            rv, ri = v, k
    dv, di = 0.0, None
    for k, con in enumerate(problem.demand_constraints):
        v = con.violation(x)
        if v > dv:
            dv, di = v, k
    bv, bi = 0.0, None
    for i in range(problem.n_resources):
        for j in range(problem.n_demands):
            v = problem.domain_of(i, j).violation(x[i, j])
            if v > bv:
                bv, bi = v, (i, j)
    return FeasibilityReport(rv, dv, bv, ri, di, bi, float(tol))


def serialize(problem: ProblemSpec) -> str:
    """Canonical JSON encoding (stable key order, deterministic bytes)."""
    return json.dumps(problem.to_json(), sort_keys=True, separators=(",", ":"))


def deserialize(text: str) -> ProblemSpec:
    """Parse and re-validate a dede-problem/1 document."""
    d = json.loads(text)
    if d.get("format") != PROBLEM_FORMAT:
        raise InvalidProblemError(f"unsupported format {d.get('format')!r}, expected {PROBLEM_FORMAT!r}")
    dom = d.get("domain", {})
    default = VariableDomain.from_json(dom.get("default", {"kind": "nonnegative_real"}))
    overrides = {(int(i), int(j)): VariableDomain.from_json(rec) for i, j, rec in dom.get("overrides", [])}
    return build_problem(
        n_resources=d["n_resources"],
        n_demands=d["n_demands"],
        sense=d["sense"],
        objective_terms=[ObjectiveTerm.from_json(t) for t in d["objective"]],
        resource_constraints=[LinearConstraint.from_json(c) for c in d["resource_constraints"]],
        demand_constraints=[LinearConstraint.from_json(c) for c in d["demand_constraints"]],
        default_domain=default,
        domain_overrides=overrides,
        allow_merge=bool(d.get("allow_merge", False)),
        meta=d.get("meta"),
    )


def save_problem(problem: ProblemSpec, path) -> None:
    with open(path, "w") as f:
        f.write(serialize(problem))
        f.write("\n")


def load_problem(path) -> ProblemSpec:
    with open(path) as f:
        return deserialize(f.read())
