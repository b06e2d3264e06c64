"""Scaled-form ADMM over a canonical problem.

One iteration runs the per-resource-group x update, the per-demand-group z
update, then the dual ascent; residual norms drive stopping and the penalty
adaptation.  Alternative update policies (pure penalty with a growing
coefficient, and joint augmented-Lagrangian multiplier steps) share the same
sweep machinery and are selected through ``SolveOptions.method``.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .canonical import CanonicalProblem, KIND_CONT, canonicalize
from .model import FeasibilityReport, ProblemSpec, VariableDomain, check_feasibility, eval_objective
from .parallel import BatchPlan, WorkerPool
from .subsolver import assemble, project_domain, solve_subproblem

__all__ = [
    "AdmmState",
    "SolveOptions",
    "SolveReport",
    "ResidualReport",
    "IterationSnapshot",
    "WarmStartError",
    "init_state",
    "x_step",
    "z_step",
    "dual_step",
    "residuals",
    "adapt_rho",
    "solve",
    "solve_problem",
]

RHO_ADAPT_RATIO = 10.0
RHO_ADAPT_FACTOR = 2.0
RHO_RANGE = 1e4  # rho stays within [rho0 / RHO_RANGE, rho0 * RHO_RANGE]
# Residual balancing is only consulted every few iterations and pauses near
# the stopping region: per-iteration rescaling ping-pongs the scaled duals
# and can destabilize an almost-converged run.
RHO_ADAPT_PERIOD = 25
PENALTY_GROWTH = 10.0
PENALTY_RANGE = 1e8


class WarmStartError(ValueError):
    """Warm-start state does not match the canonical problem's shapes."""


@dataclass
class SolveOptions:
    rho0: float = 1.0
    max_iters: int = 5000
    time_budget: Optional[float] = None  # seconds
    eps_abs: float = 1e-4
    eps_rel: float = 1e-3
    adapt_rho: bool = True
    workers: Optional[int] = None
    batch_mode: str = "static_block"
    deterministic: bool = True
    warm_start: Optional["AdmmState"] = None
    method: str = "admm"  # "admm" | "penalty" | "auglag"
    relax_iters: int = 50  # continuous-relaxation prefix for discrete domains
    subproblem_tol: Optional[float] = None  # default 0.1 * eps_abs
    subproblem_max_iter: int = 2000
    iteration_hook: Optional[Callable] = None
    rho_schedule: tuple = ()  # ((iteration, factor), ...) applied when adapt_rho is off
    collect_trajectory: bool = True
    repair: bool = True

    def __post_init__(self):
        if self.rho0 <= 0 or self.eps_abs <= 0 or self.eps_rel <= 0:
            raise ValueError("rho0, eps_abs and eps_rel must be positive")
        if self.method not in ("admm", "penalty", "auglag"):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass
class AdmmState:
    x: np.ndarray
    z: np.ndarray
    lam: np.ndarray
    alpha: list
    beta: list
    rho: float
    rho0: float
    iter: int = 0
    prev_z: Optional[np.ndarray] = None
    primal_hist: list = field(default_factory=list)
    dual_hist: list = field(default_factory=list)
    obj_hist: list = field(default_factory=list)
    adapt_events: list = field(default_factory=list)

    def clone(self) -> "AdmmState":
        return AdmmState(
            x=self.x.copy(),
            z=self.z.copy(),
            lam=self.lam.copy(),
            alpha=[a.copy() for a in self.alpha],
            beta=[b.copy() for b in self.beta],
            rho=self.rho,
            rho0=self.rho0,
            iter=self.iter,
            prev_z=None if self.prev_z is None else self.prev_z.copy(),
            primal_hist=list(self.primal_hist),
            dual_hist=list(self.dual_hist),
            obj_hist=list(self.obj_hist),
            adapt_events=list(self.adapt_events),
        )


@dataclass
class ResidualReport:
    primal: float
    dual: float
    eps_primal: float
    eps_dual: float

    @property
    def converged(self) -> bool:
        return self.primal <= self.eps_primal and self.dual <= self.eps_dual


@dataclass
class IterationSnapshot:
    iteration: int
    primal: float
    dual: float
    rho: float
    objective: Optional[float]
    x_ms: float
    z_ms: float
    state: Optional[AdmmState] = None


@dataclass
class SolveReport:
    termination: str  # "converged" | "max_iters" | "time_budget"
    iterations: int
    objective_raw: Optional[float]
    objective_repaired: Optional[float]
    allocation: np.ndarray
    allocation_raw: np.ndarray
    primal_residuals: list
    dual_residuals: list
    objectives: list
    rho_final: float
    adapt_events: list
    phase_ms: dict
    wall_ms: float
    feasibility: Optional[FeasibilityReport]
    state: AdmmState
    warnings: list
    method: str
    workers: int

    def fingerprint(self) -> str:
        """Digest of every arithmetic outcome; wall-clock fields excluded."""
        h = hashlib.sha256()
        h.update(self.termination.encode())
        h.update(np.asarray(self.allocation, dtype=float).tobytes())
        h.update(np.asarray(self.allocation_raw, dtype=float).tobytes())
        h.update(np.array(self.primal_residuals, dtype=float).tobytes())
        h.update(np.array(self.dual_residuals, dtype=float).tobytes())
        h.update(np.array([o if o is not None else np.nan for o in self.objectives], dtype=float).tobytes())
        h.update(np.array([self.iterations, self.rho_final], dtype=float).tobytes())
        h.update(repr(self.adapt_events).encode())
        h.update(np.array(
            [x if x is not None else np.nan for x in (self.objective_raw, self.objective_repaired)],
            dtype=float,
        ).tobytes())
        h.update(self.state.x.tobytes())
        h.update(self.state.z.tobytes())
        h.update(self.state.lam.tobytes())
        return h.hexdigest()


def init_state(canonical: CanonicalProblem, opts: SolveOptions) -> AdmmState:
    """Cold start at zero projected into the domains, or a validated copy."""
    N = canonical.n_active
    if opts.warm_start is not None:
        ws = opts.warm_start
        if ws.x.shape != (N,) or ws.z.shape != (N,) or ws.lam.shape != (N,):
            raise WarmStartError(f"warm-start vector length {ws.x.shape} != ({N},)")
        if len(ws.alpha) != len(canonical.resource_groups) or any(
            a.size != g.n_constraints for a, g in zip(ws.alpha, canonical.resource_groups)
        ):
            raise WarmStartError("warm-start alpha shapes do not match resource groups")
        if len(ws.beta) != len(canonical.demand_groups) or any(
            b.size != g.n_constraints for b, g in zip(ws.beta, canonical.demand_groups)
        ):
            raise WarmStartError("warm-start beta shapes do not match demand groups")
        st = ws.clone()
        st.iter = 0
        st.rho0 = opts.rho0
        st.primal_hist, st.dual_hist, st.obj_hist = [], [], []
        st.adapt_events = []
        st.prev_z = None
        return st
    x0 = np.clip(np.zeros(N), canonical.lo, canonical.hi)
    return AdmmState(
        x=x0.copy(),
        z=x0.copy(),
        lam=np.zeros(N),
        alpha=[np.zeros(g.n_constraints) for g in canonical.resource_groups],
        beta=[np.zeros(g.n_constraints) for g in canonical.demand_groups],
        rho=opts.rho0,
        rho0=opts.rho0,
    )


def _run_side(state, canonical, pool, plan, side, tol, max_iter, flags):
    """Solve one side's group subproblems in parallel and scatter results."""
    rho = state.rho
    if side == "resource":
        groups, duals, iterate = canonical.resource_groups, state.alpha, state.x
        base, coupling_sign, bounded = state.z, -1.0, True
    else:
        groups, duals, iterate = canonical.demand_groups, state.beta, state.z
        base, coupling_sign, bounded = state.x, 1.0, False
    lam = state.lam

    def task(gi):
        g = groups[gi]
        coords = g.coords
        sp = assemble(g, rho, duals[gi], base[coords] + coupling_sign * lam[coords], bounded=bounded)
        sp.warm = iterate[coords]
        return solve_subproblem(sp, tol, max_iter)

    results = pool.run_batch(plan, task)
    for gi, res in zip(plan.tasks, results):
        iterate[groups[gi].coords] = res.solution
        if res.status != "optimal":
            flags[side] = flags.get(side, 0) + 1
    return results


def x_step(state: AdmmState, canonical: CanonicalProblem, pool: WorkerPool,
           opts: Optional[SolveOptions] = None, integer_phase: bool = False) -> AdmmState:
    """Per-resource-group minimization; only x changes."""
    opts = opts or SolveOptions()
    tol = opts.subproblem_tol if opts.subproblem_tol is not None else 0.1 * opts.eps_abs
    plan = BatchPlan(range(len(canonical.resource_groups)), opts.batch_mode, pool.workers)
    flags = {}
    _run_side(state, canonical, pool, plan, "resource", tol, opts.subproblem_max_iter, flags)
    free = canonical.x_free
    if free.size:
        state.x[free] = np.clip(state.z[free] - state.lam[free], canonical.lo[free], canonical.hi[free])
    if integer_phase and canonical.has_discrete:
        mask = canonical.kind != KIND_CONT
        state.x[mask] = project_domain(state.x[mask], canonical.lo[mask], canonical.hi[mask], canonical.kind[mask])
    return state


def z_step(state: AdmmState, canonical: CanonicalProblem, pool: WorkerPool,
           opts: Optional[SolveOptions] = None) -> AdmmState:
    """Per-demand-group minimization of the fresh x iterate; only z changes."""
    opts = opts or SolveOptions()
    tol = opts.subproblem_tol if opts.subproblem_tol is not None else 0.1 * opts.eps_abs
    plan = BatchPlan(range(len(canonical.demand_groups)), opts.batch_mode, pool.workers)
    state.prev_z = state.z.copy()
    flags = {}
    _run_side(state, canonical, pool, plan, "demand", tol, opts.subproblem_max_iter, flags)
    free = canonical.z_free
    if free.size:
        state.z[free] = state.x[free] + state.lam[free]
    return state


def _constraint_residuals(state, canonical):
    """Per-group equality residuals (R x - r on x, D z - d on z)."""
    rx = [g.matmul(state.x[g.coords]) - g.b for g in canonical.resource_groups]
    rz = [g.matmul(state.z[g.coords]) - g.b for g in canonical.demand_groups]
    return rx, rz


def dual_step(state: AdmmState, canonical: CanonicalProblem, rx=None, rz=None) -> AdmmState:
    """Scaled dual ascent: residual accumulation on alpha, beta, lambda."""
    if rx is None or rz is None:
        rx, rz = _constraint_residuals(state, canonical)
    for a, r in zip(state.alpha, rx):
        a += r
    for b, r in zip(state.beta, rz):
        b += r
    state.lam += state.x - state.z
    return state


def residuals(state: AdmmState, canonical: CanonicalProblem,
              eps_abs: float = 1e-4, eps_rel: float = 1e-3, rx=None, rz=None) -> ResidualReport:
    """Primal/dual residual norms and the combined stopping thresholds."""
    if rx is None or rz is None:
        rx, rz = _constraint_residuals(state, canonical)
    gap = state.x - state.z
    primal_sq = sum(float(r @ r) for r in rx) + sum(float(r @ r) for r in rz) + float(gap @ gap)
    primal = math.sqrt(primal_sq)
    if state.prev_z is None:
        dual = math.inf
    else:
        dz = state.z - state.prev_z
        dual = state.rho * math.sqrt(float(dz @ dz))

    ax_sq = sum(float((r + g.b) @ (r + g.b)) for r, g in zip(rx, canonical.resource_groups))
    ax_sq += float(state.x @ state.x)
    bz_sq = sum(float((r + g.b) @ (r + g.b)) for r, g in zip(rz, canonical.demand_groups))
    bz_sq += float(state.z @ state.z)
    scale = max(math.sqrt(ax_sq), math.sqrt(bz_sq), math.sqrt(canonical.rhs_norm_sq))
    p_rows = canonical.total_rows + canonical.n_active
    eps_pri = math.sqrt(max(p_rows, 1)) * eps_abs + eps_rel * scale
    eps_du = math.sqrt(max(canonical.n_active, 1)) * eps_abs + eps_rel * state.rho * float(
        np.linalg.norm(state.lam)
    )
    return ResidualReport(primal, dual, eps_pri, eps_du)


def _rescale_rho(state: AdmmState, factor: float, label: str):
    """Multiply rho by factor; rescale scaled duals so rho*dual is invariant."""
    state.rho *= factor
    inv = 1.0 / factor
    for a in state.alpha:
        a *= inv
    for b in state.beta:
        b *= inv
    state.lam *= inv
    state.adapt_events.append((state.iter, label, factor, state.rho))


def adapt_rho(state: AdmmState, primal: Optional[float] = None, dual: Optional[float] = None) -> AdmmState:
    """Residual balancing: double/halve rho, bounded around rho0."""
    if primal is None:
        primal = state.primal_hist[-1] if state.primal_hist else None
    if dual is None:
        dual = state.dual_hist[-1] if state.dual_hist else None
    if primal is None or dual is None or not math.isfinite(dual):
        return state
    lo, hi = state.rho0 / RHO_RANGE, state.rho0 * RHO_RANGE
    if primal > RHO_ADAPT_RATIO * dual and state.rho * RHO_ADAPT_FACTOR <= hi:
        _rescale_rho(state, RHO_ADAPT_FACTOR, "adapt")
    elif dual > RHO_ADAPT_RATIO * primal and state.rho / RHO_ADAPT_FACTOR >= lo:
        _rescale_rho(state, 1.0 / RHO_ADAPT_FACTOR, "adapt")
    return state


def solve_problem(problem: ProblemSpec, opts: Optional[SolveOptions] = None) -> SolveReport:
    """Canonicalize and solve a ProblemSpec."""
    return solve(canonicalize(problem), opts or SolveOptions())


def solve(canonical: CanonicalProblem, opts: Optional[SolveOptions] = None) -> SolveReport:
    """Run the configured method until the stopping rule fires."""
    opts = opts or SolveOptions()
    t_start = time.perf_counter()
    pool = WorkerPool(opts.workers, opts.batch_mode)
    warnings: list = []
    flags: dict = {}
    phase = {"x_step": 0.0, "z_step": 0.0, "dual": 0.0, "overhead": 0.0}
    base_tol = opts.subproblem_tol if opts.subproblem_tol is not None else 0.1 * opts.eps_abs
    try:
        state = init_state(canonical, opts)
        rplan = BatchPlan(range(len(canonical.resource_groups)), opts.batch_mode, pool.workers)
        zplan = BatchPlan(range(len(canonical.demand_groups)), opts.batch_mode, pool.workers)
        termination = "max_iters"
        near_stop = False
        min_sign = canonical.original.min_sign
        incumbent = None  # (minimized objective, z snapshot) with primal below threshold

        for it in range(1, opts.max_iters + 1):
            if opts.time_budget is not None and time.perf_counter() - t_start > opts.time_budget:
                termination = "time_budget"
                break
            integer_phase = canonical.has_discrete and it > opts.relax_iters
            inner_tol = base_tol * (0.1 if near_stop else 1.0)

            t0 = time.perf_counter()
            _run_side(state, canonical, pool, rplan, "resource", inner_tol, opts.subproblem_max_iter, flags)
            free = canonical.x_free
            if free.size:
                state.x[free] = np.clip(
                    state.z[free] - state.lam[free], canonical.lo[free], canonical.hi[free]
                )
            if integer_phase:
                mask = canonical.kind != KIND_CONT
                state.x[mask] = project_domain(
                    state.x[mask], canonical.lo[mask], canonical.hi[mask], canonical.kind[mask]
                )
            t1 = time.perf_counter()
            phase["x_step"] += t1 - t0

            state.prev_z = state.z.copy()
            _run_side(state, canonical, pool, zplan, "demand", inner_tol, opts.subproblem_max_iter, flags)
            zfree = canonical.z_free
            if zfree.size:
                state.z[zfree] = state.x[zfree] + state.lam[zfree]
            t2 = time.perf_counter()
            phase["z_step"] += t2 - t1

            rx, rz = _constraint_residuals(state, canonical)
            rep = residuals(state, canonical, opts.eps_abs, opts.eps_rel, rx, rz)
            if opts.method == "admm":
                dual_step(state, canonical, rx, rz)
            elif opts.method == "auglag":
                # Multiplier step only once the inner joint sweeps settle.
                if rep.dual <= rep.eps_dual:
                    dual_step(state, canonical, rx, rz)
            else:  # penalty: no multipliers, grow the coefficient on stalls
                if rep.dual <= rep.eps_dual and rep.primal > rep.eps_primal:
                    if state.rho * PENALTY_GROWTH <= state.rho0 * PENALTY_RANGE:
                        state.rho *= PENALTY_GROWTH
                        state.adapt_events.append((it, "penalty", PENALTY_GROWTH, state.rho))
            t3 = time.perf_counter()
            phase["dual"] += t3 - t2

            state.iter = it
            state.primal_hist.append(rep.primal)
            state.dual_hist.append(rep.dual)
            obj = canonical.fast_objective(state.z) if opts.collect_trajectory else None
            state.obj_hist.append(obj)

            # Keep the best near-feasible iterate seen once the primal
            # criterion holds; the final answer may come from it (see
            # _extract).  Last-iterate quality at the stopping moment is a
            # lottery on degenerate problems, the incumbent is not.
            if not canonical.has_discrete and rep.primal <= rep.eps_primal:
                clipped = np.clip(state.z, canonical.lo, canonical.hi)
                cand = canonical.fast_objective(clipped)
                if cand is not None and (incumbent is None or min_sign * cand < incumbent[0]):
                    incumbent = (min_sign * cand, clipped)

            if opts.iteration_hook is not None:
                opts.iteration_hook(
                    IterationSnapshot(
                        it, rep.primal, rep.dual, state.rho, obj,
                        (t1 - t0) * 1e3, (t2 - t1) * 1e3, state.clone(),
                    )
                )

            if rep.converged:
                termination = "converged"
                break
            near_stop = rep.primal <= 10 * rep.eps_primal and (
                not math.isfinite(rep.dual) or rep.dual <= 10 * rep.eps_dual
            )

            if opts.method == "admm":
                if opts.adapt_rho:
                    if it % RHO_ADAPT_PERIOD == 0 and not near_stop:
                        adapt_rho(state, rep.primal, rep.dual)
                else:
                    for sched_it, factor in opts.rho_schedule:
                        if sched_it == it:
                            _rescale_rho(state, factor, "scheduled")
            phase["overhead"] += time.perf_counter() - t3

        for side, cnt in flags.items():
            warnings.append(f"{cnt} {side}-side subproblem solves hit the iteration cap")

        extraction = _extract(canonical, state, opts, warnings,
                              incumbent=None if incumbent is None else incumbent[1])
        wall_ms = (time.perf_counter() - t_start) * 1e3
        return SolveReport(
            termination=termination,
            iterations=state.iter,
            objective_raw=extraction["objective_raw"],
            objective_repaired=extraction["objective_repaired"],
            allocation=extraction["allocation"],
            allocation_raw=extraction["allocation_raw"],
            primal_residuals=list(state.primal_hist),
            dual_residuals=list(state.dual_hist),
            objectives=list(state.obj_hist),
            rho_final=state.rho,
            adapt_events=list(state.adapt_events),
            phase_ms={k: v * 1e3 for k, v in phase.items()},
            wall_ms=wall_ms,
            feasibility=extraction["feasibility"],
            state=state,
            warnings=warnings,
            method=opts.method,
            workers=pool.workers,
        )
    finally:
        pool.close()


# ---------------------------------------------------------------------------
# Final-answer extraction: demand-side iterate, domain projection, repair.
# ---------------------------------------------------------------------------


def _extract(canonical: CanonicalProblem, state: AdmmState, opts: SolveOptions, warnings: list,
             incumbent=None) -> dict:
    v = project_domain(state.z.copy(), canonical.lo, canonical.hi, canonical.kind)
    alloc_raw = canonical.allocation_from_vector(v)
    problem = canonical.original
    obj_raw = _safe_objective(problem, alloc_raw)

    if not opts.repair:
        return {
            "allocation": alloc_raw.copy(),
            "allocation_raw": alloc_raw,
            "objective_raw": obj_raw,
            "objective_repaired": obj_raw,
            "feasibility": check_feasibility(problem, alloc_raw),
        }

    if canonical.has_discrete:
        v = _greedy_discrete_repair(canonical, v, warnings)
        alloc = _discrete_polish(canonical, v, opts, warnings)
        alloc = _exact_equality_rescale(problem, alloc)
    else:
        alloc = _scaling_repair(problem, alloc_raw.copy(), warnings)
        if incumbent is not None:
            cand = _scaling_repair(problem, canonical.allocation_from_vector(incumbent), warnings)
            alloc = _better_allocation(problem, alloc, cand)

    obj_rep = _safe_objective(problem, alloc)
    return {
        "allocation": alloc,
        "allocation_raw": alloc_raw,
        "objective_raw": obj_raw,
        "objective_repaired": obj_rep,
        "feasibility": check_feasibility(problem, alloc),
    }


def _better_allocation(problem, a, b, tol: float = 1e-6):
    """Prefer feasibility, then the declared-sense objective; ties keep a."""
    fa = check_feasibility(problem, a, tol).feasible
    fb = check_feasibility(problem, b, tol).feasible
    if fa != fb:
        return a if fa else b
    oa, ob = _safe_objective(problem, a), _safe_objective(problem, b)
    if oa is None:
        return b
    if ob is None:
        return a
    sign = problem.min_sign
    return b if sign * ob < sign * oa else a


def _safe_objective(problem, alloc):
    try:
        return eval_objective(problem, alloc)
    except Exception:
        return None


def _scaling_repair(problem: ProblemSpec, alloc: np.ndarray, warnings: list) -> np.ndarray:
    """Uniformly scale offending rows (or columns) down to feasibility.

    Row scaling is the default.  When the demand side carries equality
    constraints, scaling whole rows would break them, so columns are scaled
    instead; that is only sound when those equalities are homogeneous
    (conservation-style), otherwise the allocation is left as is.
    """
    dem_eqs = [c for c in problem.demand_constraints if c.rel == "=="]
    mode = "row"
    if dem_eqs:
        if all(c.rhs == 0.0 for c in dem_eqs):
            mode = "col"
        else:
            return alloc  # inhomogeneous equalities: scaling cannot preserve them

    tol = 1e-12
    gamma_rows = np.ones(problem.n_resources)
    gamma_cols = np.ones(problem.n_demands)
    scaled = False
    for con in problem.resource_constraints:
        if con.rel != "<=":
            continue
        lhs = con.value(alloc)
        if lhs <= con.rhs + tol or lhs <= 0 or con.rhs < 0:
            if lhs > con.rhs + tol:
                warnings.append("resource constraint violation not repairable by scaling")
            continue
        g = con.rhs / lhs
        scaled = True
        if mode == "row":
            for i in con.touched_rows():
                gamma_rows[i] = min(gamma_rows[i], g)
        else:
            for j in con.touched_cols():
                gamma_cols[j] = min(gamma_cols[j], g)
    if scaled:
        if mode == "row":
            alloc = alloc * gamma_rows[:, None]
        else:
            alloc = alloc * gamma_cols[None, :]
    return alloc


def _group_best_fit(group, v: np.ndarray, lo, hi, kind) -> tuple:
    """Least-squares fit of the group's continuous coords to its equalities.

    Discrete coordinates stay fixed at their rounded values; returns the
    updated local vector and the remaining residual norm.
    """
    coords = group.coords
    local = v[coords].copy()
    cont = kind[coords] == KIND_CONT
    if group.n_constraints == 0 or not np.any(cont):
        r = group.matmul(local) - group.b
        return local, float(np.linalg.norm(r, ord=np.inf)) if r.size else 0.0
    A = group.A.toarray() if hasattr(group.A, "toarray") else group.A
    Ac = A[:, cont]
    llo, lhi = lo[coords][cont], hi[coords][cont]
    target = group.b - A[:, ~cont] @ local[~cont]
    w = local[cont].copy()
    L = float(np.linalg.norm(Ac, 2)) ** 2
    if L == 0.0:
        r = group.matmul(local) - group.b
        return local, float(np.linalg.norm(r, ord=np.inf)) if r.size else 0.0
    for _ in range(300):
        r = Ac @ w - target
        g = Ac.T @ r
        w_new = np.clip(w - g / L, llo, lhi)
        if float(np.max(np.abs(w_new - w))) < 1e-12:
            w = w_new
            break
        w = w_new
    local[cont] = w
    r = Ac @ w - target
    return local, float(np.linalg.norm(r, ord=np.inf)) if r.size else 0.0


def _greedy_discrete_repair(canonical: CanonicalProblem, v: np.ndarray, warnings: list) -> np.ndarray:
    """Flip rounded coordinates, largest violation first, until each demand
    group admits a feasible continuous completion."""
    lo, hi, kind = canonical.lo, canonical.hi, canonical.kind
    for g in canonical.demand_groups:
        disc = [int(c) for c in g.coords if kind[c] != KIND_CONT]
        local, res = _group_best_fit(g, v, lo, hi, kind)
        v[g.coords] = local
        tries = 0
        while res > 1e-6 and disc and tries < len(disc):
            tries += 1
            best = None
            for c in disc:
                old = v[c]
                new = 1.0 - old if kind[c] == 1 else old  # boolean flip
                if kind[c] != 1:
                    # integer: step one unit toward reducing the violation
                    for cand in (old + 1.0, old - 1.0):
                        if lo[c] <= cand <= hi[c]:
                            new = cand
                            break
                if new == old:
                    continue
                v[c] = new
                local, r = _group_best_fit(g, v, lo, hi, kind)
                lin_pos = np.where(g.coords == c)[0][0]
                damage = g.lin[lin_pos] * (new - old)
                if best is None or (r, damage) < (best[0], best[1]):
                    best = (r, damage, c, new, local)
                v[c] = old
            if best is None or best[0] >= res - 1e-12:
                break
            res, _, c, new, local = best
            v[c] = new
            v[g.coords] = local
        if res > 1e-6:
            warnings.append(f"demand group {g.members} infeasible after discrete repair ({res:.2e})")
    return v


def _discrete_polish(canonical: CanonicalProblem, v: np.ndarray, opts: SolveOptions, warnings: list) -> np.ndarray:
    """Pin discrete coordinates and re-solve the continuous remainder tightly."""
    problem = canonical.original
    overrides = dict(problem.domain_overrides)
    alloc = canonical.allocation_from_vector(v)
    any_disc = False
    for i in range(problem.n_resources):
        for j in range(problem.n_demands):
            if problem.domain_of(i, j).is_discrete:
                overrides[(i, j)] = VariableDomain.box(alloc[i, j], alloc[i, j])
                any_disc = True
    if not any_disc:
        return alloc
    pinned_spec = ProblemSpec(
        n_resources=problem.n_resources,
        n_demands=problem.n_demands,
        sense=problem.sense,
        objective_terms=problem.objective_terms,
        resource_constraints=problem.resource_constraints,
        demand_constraints=problem.demand_constraints,
        default_domain=problem.default_domain,
        domain_overrides=tuple(sorted(overrides.items())),
        allow_merge=problem.allow_merge,
        meta=problem.meta,
    )
    polish_opts = SolveOptions(
        rho0=opts.rho0,
        max_iters=4000,
        eps_abs=min(1e-7, opts.eps_abs),
        eps_rel=1e-9,
        adapt_rho=True,
        workers=1,
        collect_trajectory=False,
        repair=False,
    )
    try:
        rep = solve(canonicalize(pinned_spec), polish_opts)
        if rep.termination != "converged":
            warnings.append("continuous polish did not converge; keeping rounded iterate")
        polished = rep.allocation
        for i in range(problem.n_resources):
            for j in range(problem.n_demands):
                if problem.domain_of(i, j).is_discrete:
                    polished[i, j] = alloc[i, j]
        return polished
    except Exception as exc:  # pragma: no cover - defensive
        warnings.append(f"continuous polish failed: {exc!r}")
        return alloc


def _exact_equality_rescale(problem: ProblemSpec, alloc: np.ndarray) -> np.ndarray:
    """Snap uniform-coefficient demand equalities (sum x = d) to exactness."""
    for con in problem.demand_constraints:
        if con.rel != "==":
            continue
        vals = [c for _, c in con.coeffs if c != 0.0]
        if not vals or any(abs(c - vals[0]) > 1e-15 for c in vals) or vals[0] <= 0:
            continue
        if any(problem.domain_of(i, j).is_discrete for (i, j), c in con.coeffs if c != 0.0):
            continue
        cur = con.value(alloc)
        if cur <= 1e-12 or abs(cur - con.rhs) > 1e-3 * max(1.0, abs(con.rhs)):
            continue
        factor = con.rhs / cur
        for (i, j), c in con.coeffs:
            if c != 0.0:
                alloc[i, j] *= factor
    return alloc
