"""Desk-scale instance generators for the three case studies.

All generators are pure functions of their parameters and seed, emit
validated ProblemSpec objects in the dede-problem/1 format, and attach a
``meta`` record describing the case so tooling can pick the right oracle.
"""

from __future__ import annotations

import heapq
import math
import warnings as _warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .model import (
    EpigraphUtility,
    LinearConstraint,
    ObjectiveTerm,
    ProblemSpec,
    VariableDomain,
    build_problem,
)

__all__ = [
    "ClusterInstance",
    "TrafficInstance",
    "LoadBalanceInstance",
    "StructurallyInfeasibleError",
    "gen_cluster",
    "gen_traffic",
    "gen_load_balance",
    "perturb",
    "perturb_instance",
    "make_cluster_instance",
    "make_traffic_instance",
    "make_load_balance_instance",
    "cluster_problem",
    "traffic_problem",
    "load_balance_problem",
    "cluster_from_tables",
    "intro_split_instance",
]


class StructurallyInfeasibleError(ValueError):
    """Instance cannot be feasible regardless of the allocation."""


# ---------------------------------------------------------------------------
# Cluster scheduling
# ---------------------------------------------------------------------------


@dataclass
class ClusterInstance:
    capacity: np.ndarray  # instance-hours per resource type
    req: np.ndarray  # instances requested per job
    tput: np.ndarray  # raw throughput, type x job
    weights: np.ndarray  # per-job priority
    allowed: np.ndarray  # boolean mask, type x job
    variant: str  # "max_min" | "prop_fair" | "total_weighted"
    seed: Optional[int] = None

    @property
    def n_types(self) -> int:
        return self.capacity.size

    @property
    def n_jobs(self) -> int:
        return self.req.size

    def normalized_tput(self) -> np.ndarray:
        """Effective throughput normalized by each job's best single type."""
        masked = np.where(self.allowed, self.tput, 0.0)
        best = masked.max(axis=0)
        best[best <= 0] = 1.0
        return masked / best[None, :]


def make_cluster_instance(n_types: int, n_jobs: int, variant: str, seed: int) -> ClusterInstance:
    rng = np.random.default_rng(seed)
    type_mult = np.exp(rng.uniform(math.log(0.5), math.log(2.0), size=n_types))
    tput = np.exp(rng.uniform(math.log(1.0), math.log(100.0), size=(n_types, n_jobs))) * type_mult[:, None]
    req = rng.choice([1.0, 2.0, 4.0], size=n_jobs)
    capacity = rng.uniform(0.5, 1.5, size=n_types) * (req.sum() / n_types)
    weights = np.ones(n_jobs)
    allowed = np.ones((n_types, n_jobs), dtype=bool)
    n_masked = n_jobs // 3  # roughly a third of the jobs are type-restricted
    if n_masked and n_types > 1:
        masked_jobs = rng.choice(n_jobs, size=n_masked, replace=False)
        for j in masked_jobs:
            n_keep = int(rng.integers(1, max(2, n_types // 2 + 1)))
            keep = rng.choice(n_types, size=n_keep, replace=False)
            allowed[:, j] = False
            allowed[keep, j] = True
    return ClusterInstance(capacity, req, tput, weights, allowed, variant, seed)


def cluster_problem(inst: ClusterInstance) -> ProblemSpec:
    n, m = inst.n_types, inst.n_jobs
    nt = inst.normalized_tput() if inst.variant in ("max_min", "prop_fair") else np.where(inst.allowed, inst.tput, 0.0)

    overrides = {}
    for i in range(n):
        for j in range(m):
            if not inst.allowed[i, j]:
                overrides[(i, j)] = VariableDomain.box(0.0, 0.0)

    demand_cons = []
    for j in range(m):
        coeffs = {(i, j): 1.0 for i in range(n) if inst.allowed[i, j]}
        demand_cons.append(LinearConstraint(coeffs, "<=", 1.0))
    resource_cons = []
    for i in range(n):
        coeffs = {(i, j): float(inst.req[j]) for j in range(m) if inst.allowed[i, j]}
        if coeffs:
            resource_cons.append(LinearConstraint(coeffs, "<=", float(inst.capacity[i])))

    if inst.variant == "max_min":
        utils = [
            EpigraphUtility("col", j, {(i, j): float(nt[i, j]) for i in range(n) if inst.allowed[i, j]})
            for j in range(m)
        ]
        terms = [ObjectiveTerm.epigraph_min(utils)]
    elif inst.variant == "prop_fair":
        terms = [
            ObjectiveTerm.weighted_log(
                ("col", j),
                {(i, j): float(nt[i, j]) for i in range(n) if inst.allowed[i, j]},
                weight=float(inst.weights[j]),
            )
            for j in range(m)
        ]
    elif inst.variant == "total_weighted":
        terms = [
            ObjectiveTerm.linear(
                ("col", j),
                {(i, j): float(inst.weights[j] * nt[i, j]) for i in range(n) if inst.allowed[i, j]},
            )
            for j in range(m)
        ]
    else:
        raise ValueError(f"unknown cluster variant {inst.variant!r}")

    meta = {"case": "cluster", "variant": inst.variant}
    if inst.seed is not None:
        meta["seed"] = inst.seed
    return build_problem(
        n_resources=n,
        n_demands=m,
        sense="maximize",
        objective_terms=terms,
        resource_constraints=resource_cons,
        demand_constraints=demand_cons,
        default_domain=VariableDomain.box(0.0, 1.0),
        domain_overrides=overrides,
        meta=meta,
    )


def gen_cluster(n_types: int, n_jobs: int, variant: str, seed: int) -> ProblemSpec:
    """Heterogeneous-cluster scheduling instance (jobs time-slice over types)."""
    return cluster_problem(make_cluster_instance(n_types, n_jobs, variant, seed))


def cluster_from_tables(capacity, req, tput, weights=None, allowed=None, variant="total_weighted") -> ProblemSpec:
    """Fixed-table cluster instance (generator override for hand-built cases)."""
    capacity = np.asarray(capacity, dtype=float)
    tput = np.asarray(tput, dtype=float)
    req = np.asarray(req, dtype=float)
    n, m = tput.shape
    weights = np.ones(m) if weights is None else np.asarray(weights, dtype=float)
    allowed = np.ones((n, m), dtype=bool) if allowed is None else np.asarray(allowed, dtype=bool)
    inst = ClusterInstance(capacity, req, tput, weights, allowed, variant)
    return cluster_problem(inst)


def intro_split_instance() -> ProblemSpec:
    """3 jobs x 3 GPU types whose optimum splits job 1 as 0.8h + 0.2h.

    Type C has 1.2 instance-hours of capacity and serves job 1 at 10 TPS;
    the unique optimum runs job 1 for 0.8h on type A and 0.2h on type C.
    """
    capacity = [0.8, 1.0, 1.2]
    tput = [
        [50.0, 30.0, 20.0],
        [20.0, 40.0, 25.0],
        [10.0, 15.0, 30.0],
    ]
    return cluster_from_tables(capacity, [1.0, 1.0, 1.0], tput, variant="total_weighted")


# ---------------------------------------------------------------------------
# Traffic engineering
# ---------------------------------------------------------------------------


@dataclass
class TrafficInstance:
    n_nodes: int
    edges: list  # directed (u, v), fixed order = matrix rows
    capacity: dict  # (u, v) -> float
    demands: dict  # (s, t) -> float
    paths: dict  # (s, t) -> tuple of paths; a path is a tuple of directed edges
    variant: str  # "total_flow" | "min_mlu"
    seed: Optional[int] = None

    @property
    def pairs(self) -> list:
        return sorted(self.demands)


def _grid_edges(a: int, b: int):
    nodes = a * b
    und = []
    for r in range(a):
        for c in range(b):
            u = r * b + c
            if c + 1 < b:
                und.append((u, u + 1))
            if r + 1 < a:
                und.append((u, u + b))
    return nodes, und


def _random_edges(n_nodes: int, degree: int, rng):
    und = set()
    order = rng.permutation(n_nodes)
    for i in range(1, n_nodes):
        u = int(order[i])
        v = int(order[int(rng.integers(0, i))])
        und.add((min(u, v), max(u, v)))
    target = max(n_nodes - 1, n_nodes * degree // 2)
    guard = 0
    while len(und) < target and guard < 50 * target:
        guard += 1
        u = int(rng.integers(0, n_nodes))
        v = int(rng.integers(0, n_nodes))
        if u != v:
            und.add((min(u, v), max(u, v)))
    return n_nodes, sorted(und)


def _shortest_path(adj, s, t, banned_nodes=frozenset(), banned_edges=frozenset()):
    """Hop-count Dijkstra with deterministic neighbor order."""
    dist = {s: 0}
    prev = {}
    heap = [(0, s)]
    while heap:
        d, u = heapq.heappop(heap)
        if u == t:
            break
        if d > dist.get(u, math.inf):
            continue
        for v in adj.get(u, ()):
            if v in banned_nodes or (u, v) in banned_edges:
                continue
            nd = d + 1
            if nd < dist.get(v, math.inf):
                dist[v] = nd
                prev[v] = u
                heapq.heappush(heap, (nd, v))
    if t not in dist:
        return None
    path = [t]
    while path[-1] != s:
        path.append(prev[path[-1]])
    return tuple(reversed(path))


def _k_shortest_paths(adj, s, t, k):
    """Yen's algorithm: repeated shortest path with edge/node removal."""
    first = _shortest_path(adj, s, t)
    if first is None:
        return []
    paths = [first]
    candidates = []
    while len(paths) < k:
        prev_path = paths[-1]
        for i in range(len(prev_path) - 1):
            spur = prev_path[i]
            root = prev_path[: i + 1]
            banned_edges = set()
            for p in paths:
                if p[: i + 1] == root and len(p) > i + 1:
                    banned_edges.add((p[i], p[i + 1]))
            banned_nodes = frozenset(root[:-1])
            tail = _shortest_path(adj, spur, t, banned_nodes, frozenset(banned_edges))
            if tail is None:
                continue
            cand = root[:-1] + tail
            if cand not in (c for _, c in candidates) and cand not in paths:
                candidates.append((len(cand), cand))
        if not candidates:
            break
        candidates.sort()
        _, best = candidates.pop(0)
        paths.append(best)
    return paths


def make_traffic_instance(topology, k_paths: int, variant: str, seed: int, n_pairs: int = 20) -> TrafficInstance:
    rng = np.random.default_rng(seed)
    kind = topology[0]
    if kind == "grid":
        n_nodes, und = _grid_edges(topology[1], topology[2])
    elif kind == "random":
        n_nodes, und = _random_edges(topology[1], topology[2], rng)
    else:
        raise ValueError(f"unknown topology {topology!r}")

    edges = []
    for u, v in und:
        edges.append((u, v))
        edges.append((v, u))
    edges.sort()
    capacity = {e: float(rng.uniform(5.0, 20.0)) for e in edges}

    adj = {}
    for u, v in edges:
        adj.setdefault(u, []).append(v)
    for u in adj:
        adj[u].sort()

    # Every node appears as a source so grouping by source covers the graph.
    pairs = []
    for s in range(n_nodes):
        t = int(rng.integers(0, n_nodes - 1))
        t = t if t < s else t + 1
        pairs.append((s, t))
    seen = set(pairs)
    guard = 0
    while len(pairs) < n_pairs and guard < 50 * n_pairs:
        guard += 1
        s = int(rng.integers(0, n_nodes))
        t = int(rng.integers(0, n_nodes))
        if s != t and (s, t) not in seen:
            seen.add((s, t))
            pairs.append((s, t))

    demands, paths = {}, {}
    for s, t in sorted(pairs):
        plist = _k_shortest_paths(adj, s, t, k_paths)
        if not plist:
            _warnings.warn(f"demand {(s, t)} dropped: no path in topology")
            continue
        demands[(s, t)] = float(rng.uniform(1.0, 10.0))
        paths[(s, t)] = tuple(tuple(zip(p, p[1:])) for p in plist)

    inst = TrafficInstance(n_nodes, edges, capacity, demands, paths, variant, seed)
    if variant == "min_mlu":
        _scale_demands_routable(inst, fill=0.9)
    return inst


def _scale_demands_routable(inst: TrafficInstance, fill: float) -> None:
    """Scale demands so even path splitting yields utilization <= fill."""
    load = {e: 0.0 for e in inst.edges}
    for pair, plist in inst.paths.items():
        share = inst.demands[pair] / len(plist)
        for path in plist:
            for e in path:
                load[e] += share
    worst = max((load[e] / inst.capacity[e] for e in inst.edges if inst.capacity[e] > 0), default=0.0)
    if worst > 0:
        factor = fill / worst
        for pair in inst.demands:
            inst.demands[pair] *= factor


def traffic_problem(inst: TrafficInstance) -> ProblemSpec:
    edge_row = {e: i for i, e in enumerate(inst.edges)}
    pairs = inst.pairs
    pair_col = {p: j for j, p in enumerate(pairs)}
    n, m = len(inst.edges), len(pairs)
    if m == 0:
        raise StructurallyInfeasibleError("no routable demands")

    pair_edges = {p: sorted({e for path in inst.paths[p] for e in path}) for p in pairs}

    overrides = {}
    used = set()
    for p in pairs:
        for e in pair_edges[p]:
            used.add((edge_row[e], pair_col[p]))
    for i in range(n):
        for j in range(m):
            if (i, j) not in used:
                overrides[(i, j)] = VariableDomain.box(0.0, 0.0)

    resource_cons = []
    used_rows = sorted({i for i, _ in used})
    for i in used_rows:
        e = inst.edges[i]
        coeffs = {(i, j): 1.0 for j in range(m) if (i, j) in used}
        resource_cons.append(LinearConstraint(coeffs, "<=", float(inst.capacity[e])))

    demand_cons = []
    for p in pairs:
        s, t = p
        j = pair_col[p]
        in_t = {(edge_row[e], j): 1.0 for e in pair_edges[p] if e[1] == t}
        demand_cons.append(LinearConstraint(in_t, "==" if inst.variant == "min_mlu" else "<=", float(inst.demands[p])))
        if inst.variant != "min_mlu":
            demand_cons.append(LinearConstraint(dict(in_t), ">=", 0.0))
        nodes_on_paths = sorted({v for path in inst.paths[p] for e in path for v in e} - {s, t})
        for v in nodes_on_paths:
            coeffs = {}
            for e in pair_edges[p]:
                if e[1] == v:
                    coeffs[(edge_row[e], j)] = coeffs.get((edge_row[e], j), 0.0) + 1.0
                if e[0] == v:
                    coeffs[(edge_row[e], j)] = coeffs.get((edge_row[e], j), 0.0) - 1.0
            coeffs = {k: c for k, c in coeffs.items() if c != 0.0}
            if coeffs:
                demand_cons.append(LinearConstraint(coeffs, "==", 0.0))

    # Redundant per-source caps: the sum of a source's per-pair bounds.  They
    # change nothing mathematically but make the column grouping collect all
    # pairs of a source into one per-source subproblem.
    by_source = {}
    for p in pairs:
        by_source.setdefault(p[0], []).append(p)
    for s in sorted(by_source):
        plist = by_source[s]
        if len(plist) < 2:
            continue
        coeffs = {}
        total = 0.0
        for p in plist:
            j = pair_col[p]
            total += inst.demands[p]
            for e in pair_edges[p]:
                if e[1] == p[1]:
                    key = (edge_row[e], j)
                    coeffs[key] = coeffs.get(key, 0.0) + 1.0
        demand_cons.append(LinearConstraint(coeffs, "<=", float(total)))

    if inst.variant == "total_flow":
        terms = []
        for p in pairs:
            j = pair_col[p]
            weights = {(edge_row[e], j): 1.0 for e in pair_edges[p] if e[1] == p[1]}
            terms.append(ObjectiveTerm.linear(("col", j), weights))
        sense = "maximize"
    elif inst.variant == "min_mlu":
        utils = []
        for i in used_rows:
            e = inst.edges[i]
            cap = max(inst.capacity[e], 1e-6)
            coeffs = {(i, j): 1.0 / cap for j in range(m) if (i, j) in used}
            utils.append(EpigraphUtility("row", i, coeffs))
        terms = [ObjectiveTerm.epigraph_max(utils)]
        sense = "minimize"
    else:
        raise ValueError(f"unknown traffic variant {inst.variant!r}")

    meta = {"case": "traffic", "variant": inst.variant, "n_nodes": inst.n_nodes}
    if inst.seed is not None:
        meta["seed"] = inst.seed
    return build_problem(
        n_resources=n,
        n_demands=m,
        sense=sense,
        objective_terms=terms,
        resource_constraints=resource_cons,
        demand_constraints=demand_cons,
        default_domain=VariableDomain.nonneg(),
        domain_overrides=overrides,
        allow_merge=True,
        meta=meta,
    )


def gen_traffic(topology, k_paths: int = 4, variant: str = "total_flow", seed: int = 0, n_pairs: int = 20) -> ProblemSpec:
    """Path-based traffic engineering instance on a grid or random topology."""
    return traffic_problem(make_traffic_instance(topology, k_paths, variant, seed, n_pairs))


# ---------------------------------------------------------------------------
# Load balancing
# ---------------------------------------------------------------------------


@dataclass
class LoadBalanceInstance:
    load: np.ndarray  # query load per shard, scaled so the mean server load is 1
    footprint: np.ndarray  # memory footprint per shard
    memory: np.ndarray  # capacity per server
    prior: np.ndarray  # binary prior placement, server x shard
    eps: float
    seed: Optional[int] = None

    @property
    def n_servers(self) -> int:
        return self.memory.size

    @property
    def n_shards(self) -> int:
        return self.load.size

    @property
    def mean_load(self) -> float:
        return float(self.load.sum() / self.n_servers)


def make_load_balance_instance(n_servers: int, n_shards: int, eps: float, seed: int) -> LoadBalanceInstance:
    rng = np.random.default_rng(seed)
    load = rng.uniform(0.5, 1.5, size=n_shards)
    load *= n_servers / load.sum()  # mean server load L = 1
    footprint = rng.uniform(0.05, 0.25, size=n_shards)
    memory = np.full(n_servers, footprint.sum() / n_servers * 2.5) + rng.uniform(0.0, 0.1, size=n_servers)
    prior = np.zeros((n_servers, n_shards))
    for j in range(n_shards):
        prior[int(rng.integers(0, n_servers)), j] = 1.0
    return LoadBalanceInstance(load, footprint, memory, prior, eps, seed)


def load_balance_problem(inst: LoadBalanceInstance) -> ProblemSpec:
    n, m = inst.n_servers, inst.n_shards
    if inst.footprint.sum() > inst.memory.sum():
        raise StructurallyInfeasibleError(
            f"total footprint {inst.footprint.sum():.3f} exceeds total memory {inst.memory.sum():.3f}"
        )
    L = inst.mean_load

    # Columns 0..m-1 hold the fractional assignment, columns m..2m-1 the
    # boolean placement indicators for the same shard.
    overrides = {}
    for i in range(n):
        for j in range(m):
            overrides[(i, m + j)] = VariableDomain.boolean()

    demand_cons = []
    for j in range(m):
        demand_cons.append(LinearConstraint({(i, j): 1.0 for i in range(n)}, "==", 1.0))
        for i in range(n):
            demand_cons.append(LinearConstraint({(i, j): 1.0, (i, m + j): -1.0}, "<=", 0.0))

    resource_cons = []
    for i in range(n):
        loads = {(i, j): float(inst.load[j]) for j in range(m)}
        resource_cons.append(LinearConstraint(loads, "<=", L + inst.eps))
        resource_cons.append(LinearConstraint(dict(loads), ">=", L - inst.eps))
        mems = {(i, m + j): float(inst.footprint[j]) for j in range(m)}
        resource_cons.append(LinearConstraint(mems, "<=", float(inst.memory[i])))

    terms = []
    for j in range(m):
        weights = {(i, m + j): float((1.0 - inst.prior[i, j]) * inst.footprint[j]) for i in range(n)}
        terms.append(ObjectiveTerm.linear(("col", m + j), weights))

    meta = {
        "case": "load_balance",
        "total_footprint": float(inst.footprint.sum()),
        "total_memory": float(inst.memory.sum()),
        "eps": inst.eps,
    }
    if inst.seed is not None:
        meta["seed"] = inst.seed
    return build_problem(
        n_resources=n,
        n_demands=2 * m,
        sense="minimize",
        objective_terms=terms,
        resource_constraints=resource_cons,
        demand_constraints=demand_cons,
        default_domain=VariableDomain.box(0.0, 1.0),
        domain_overrides=overrides,
        allow_merge=True,
        meta=meta,
    )


def gen_load_balance(n_servers: int, n_shards: int, eps: float = 0.1, seed: int = 0) -> ProblemSpec:
    """Shard-movement minimization with a load band and memory caps."""
    return load_balance_problem(make_load_balance_instance(n_servers, n_shards, eps, seed))


def movement_count(inst: LoadBalanceInstance, allocation: np.ndarray, tol: float = 1e-6) -> int:
    """Number of shard placements outside the prior placement."""
    n, m = inst.n_servers, inst.n_shards
    placed = allocation[:, m:] > 0.5
    return int(np.sum(placed & (inst.prior < 0.5)))


# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------


def perturb_instance(instance, kind, seed: int):
    """Perturbed copy of an instance; sparsity is preserved where possible."""
    rng = np.random.default_rng(seed)
    name = kind[0] if isinstance(kind, tuple) else kind

    if isinstance(instance, ClusterInstance):
        if name == "rhs_noise":
            sigma = kind[1]
            capacity = np.maximum(instance.capacity * (1.0 + sigma * rng.standard_normal(instance.n_types)),
                                  0.05 * instance.capacity)
            return replace(instance, capacity=capacity)
        if name == "demand_shift":
            req = instance.req[rng.permutation(instance.n_jobs)]
            return replace(instance, req=req)
        raise ValueError(f"perturbation {name!r} does not apply to cluster instances")

    if isinstance(instance, TrafficInstance):
        if name == "rhs_noise":
            sigma = kind[1]
            capacity = {
                e: max(c * (1.0 + sigma * float(rng.standard_normal())), 0.05 * c)
                for e, c in instance.capacity.items()
            }
            return replace(instance, capacity=capacity)
        if name == "demand_shift":
            vals = np.array([instance.demands[p] for p in instance.pairs])
            new_vals = rng.uniform(1.0, 10.0, size=vals.size)
            new_vals *= vals.sum() / new_vals.sum()
            demands = dict(zip(instance.pairs, (float(v) for v in new_vals)))
            out = replace(instance, demands=demands)
            if instance.variant == "min_mlu":
                _scale_demands_routable(out, fill=0.9)
            return out
        if name == "link_failures":
            count = kind[1]
            edges = list(instance.edges)
            failed = {edges[int(i)] for i in rng.choice(len(edges), size=min(count, len(edges)), replace=False)}
            capacity = {e: (0.0 if e in failed else c) for e, c in instance.capacity.items()}
            demands = dict(instance.demands)
            for p, plist in instance.paths.items():
                alive = [path for path in plist if not any(e in failed for e in path)]
                if not alive and demands.get(p, 0.0) > 0.0:
                    _warnings.warn(f"demand {p} zeroed: all paths cross failed links")
                    demands[p] = 0.0
            return replace(instance, capacity=capacity, demands=demands)
        raise ValueError(f"perturbation {name!r} does not apply to traffic instances")

    if isinstance(instance, LoadBalanceInstance):
        if name == "rhs_noise":
            sigma = kind[1]
            memory = np.maximum(instance.memory * (1.0 + sigma * rng.standard_normal(instance.n_servers)),
                                0.05 * instance.memory)
            return replace(instance, memory=memory)
        if name == "demand_shift":
            load = instance.load[rng.permutation(instance.n_shards)]
            return replace(instance, load=load)
        raise ValueError(f"perturbation {name!r} does not apply to load-balance instances")

    raise TypeError(f"unknown instance type {type(instance).__name__}")


def perturb(instance, kind, seed: int) -> ProblemSpec:
    """Perturb an instance and emit the corresponding ProblemSpec."""
    out = perturb_instance(instance, kind, seed)
    if isinstance(out, ClusterInstance):
        return cluster_problem(out)
    if isinstance(out, TrafficInstance):
        return traffic_problem(out)
    return load_balance_problem(out)
