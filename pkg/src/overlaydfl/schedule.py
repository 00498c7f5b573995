"""Multicast demands and minimum-time overlay communication schedules.

A schedule routes each multicast flow along a Steiner arborescence of
directed overlay links and assigns it a single rate.  Capacity is checked per
link category: every category ``F`` bounds the summed rate of all tree links
that belong to ``F``.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .underlay import CategoryKey, CategoryTable, InferredView, category_sort_key

Edge = Tuple[int, int]

RTOL = 1e-9


class InfeasibleDemandError(ValueError):
    pass


@dataclass(frozen=True)
class Flow:
    source: int
    targets: FrozenSet[int]
    size: float

    def __post_init__(self):
        object.__setattr__(self, "targets", frozenset(self.targets))
        if not self.targets:
            raise ValueError(f"flow from {self.source} has no destinations")
        if self.source in self.targets:
            raise ValueError(f"flow from {self.source} lists its source as a destination")
        if not self.size > 0:
            raise ValueError(f"flow from {self.source} must carry a positive size")


def _sizes(size, m: int) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(size, dtype=float), (m,))
    return np.array(arr)


def demands_from_activation(active: Iterable[Edge], size, m: Optional[int] = None) -> Tuple[Flow, ...]:
    """One multicast flow per agent with at least one activated neighbour.

    ``size`` is the parameter-vector size in bits, scalar or per agent.
    """
    active = {(min(i, j), max(i, j)) for i, j in active}
    if m is None:
        m = len(np.atleast_1d(size)) if np.ndim(size) else 1 + max((j for _, j in active), default=-1)
    kappa = _sizes(size, m)
    nbrs: Dict[int, set] = {}
    for i, j in active:
        nbrs.setdefault(i, set()).add(j)
        nbrs.setdefault(j, set()).add(i)
    return tuple(Flow(i, frozenset(nbrs[i]), float(kappa[i])) for i in sorted(nbrs))


def _check_flows(flows):
    flows = tuple(sorted(flows, key=lambda f: f.source))
    srcs = [f.source for f in flows]
    if len(set(srcs)) != len(srcs):
        raise ValueError("at most one flow per source is allowed")
    return flows


def _caps(view) -> Dict[CategoryKey, float]:
    if isinstance(view, CategoryTable):
        return view.capacities()
    if isinstance(view, InferredView):
        return dict(view.capacities)
    return dict(view)


@dataclass(frozen=True)
class Schedule:
    """Routing trees, per-destination paths, rates and completion time.

    ``trees[s]`` is the set of overlay links with ``z = 1`` for the flow sourced
    at ``s``; ``paths[(s, k)]`` is the ordered path to destination ``k``
    (``r = 1`` links); ``link_rates[s][e]`` is ``f`` on link ``e``.
    """

    flows: Tuple[Flow, ...]
    trees: Mapping[int, FrozenSet[Edge]]
    paths: Mapping[Tuple[int, int], Tuple[Edge, ...]]
    rates: Mapping[int, float]
    link_rates: Mapping[int, Mapping[Edge, float]]
    tau: float
    big_m: float
    method: str = ""
    optimal: bool = False

    def z(self, source: int, link: Edge) -> int:
        return int(link in self.trees.get(source, ()))

    def r(self, source: int, dest: int, link: Edge) -> int:
        return int(link in self.paths.get((source, dest), ()))

    def unicasts(self) -> List[Tuple[int, Edge]]:
        return [(s, e) for s in sorted(self.trees) for e in sorted(self.trees[s])]

    def to_dict(self, agent_ids: Optional[Sequence] = None) -> dict:
        name = (lambda i: agent_ids[i]) if agent_ids is not None else (lambda i: i)
        return {
            "tau_s": self.tau,
            "method": self.method,
            "optimal": self.optimal,
            "big_m": self.big_m,
            "flows": [
                {
                    "source": name(f.source),
                    "targets": [name(k) for k in sorted(f.targets)],
                    "size_bits": f.size,
                    "rate_bps": self.rates[f.source],
                    "tree": [[name(i), name(j)] for i, j in sorted(self.trees[f.source])],
                }
                for f in self.flows
            ],
        }


def tree_paths(source: int, tree: Iterable[Edge]) -> Dict[int, Tuple[Edge, ...]]:
    """Root-to-node paths of an arborescence; raises if ``tree`` is not one."""
    parent = {}
    for i, j in tree:
        if j in parent or j == source:
            raise ValueError(f"node {j} has more than one parent in the tree of {source}")
        parent[j] = i
    paths = {}
    for v in parent:
        path, u, seen = [], v, set()
        while u != source:
            if u in seen or u not in parent:
                raise ValueError(f"tree of {source} does not reach node {v} from the root")
            seen.add(u)
            path.append((parent[u], u))
            u = parent[u]
        paths[v] = tuple(reversed(path))
    return paths


def _path_delay(path, delays) -> float:
    if not delays:
        return 0.0
    return float(sum(delays.get(e, 0.0) for e in path))


class _RateModel:
    """Rate feasibility for fixed routing against one capacity view."""

    def __init__(self, flows, view, delays):
        self.flows = flows
        caps = _caps(view)
        if not caps:
            raise ValueError("capacity view is empty")
        self.keys = sorted(caps, key=category_sort_key)
        self.cap = np.array([caps[F] for F in self.keys], dtype=float)
        self.big_m = float(self.cap.sum())
        self.rows: Dict[Edge, np.ndarray] = {}
        member: Dict[Edge, List[int]] = {}
        for r, F in enumerate(self.keys):
            for e in F:
                member.setdefault(e, []).append(r)
        self.rows = {e: np.array(v, dtype=int) for e, v in member.items()}
        self.kappa = np.array([f.size for f in flows], dtype=float)
        self.delays = dict(delays) if delays else {}
        self.index = {f.source: h for h, f in enumerate(flows)}

    def counts(self, tree) -> np.ndarray:
        c = np.zeros(len(self.keys))
        for e in tree:
            rows = self.rows.get(e)
            if rows is not None:
                c[rows] += 1
        return c

    def tree_delay(self, source, tree) -> float:
        if not self.delays:
            return 0.0
        return max((_path_delay(p, self.delays) for p in tree_paths(source, tree).values()), default=0.0)

    def min_time(self, counts: np.ndarray, D: np.ndarray) -> float:
        """Smallest ``tau`` with ``sum_h counts[F,h] kappa_h / (tau - D_h) <= C_F``.

        ``counts`` is ``n_categories x n_flows``.
        """
        load0 = counts @ self.kappa
        with np.errstate(divide="ignore", invalid="ignore"):
            util = np.where(load0 > 0, load0 / self.cap, 0.0)
        if np.any((load0 > 0) & (self.cap <= 0)):
            return math.inf
        tau0 = max(float(util.max(initial=0.0)), float(self.kappa.max(initial=0.0)) / self.big_m)
        if not np.any(D > 0):
            return tau0
        lo, hi = max(tau0, float(D.max())), tau0 + float(D.max())

        def feasible(tau):
            slack = tau - D
            if np.any(slack <= 0):
                return False
            rate = self.kappa / slack
            return bool(np.all(counts @ rate <= self.cap * (1 + 1e-15)) and np.all(rate <= self.big_m))

        while hi - lo > RTOL * hi * 1e-3:
            mid = 0.5 * (lo + hi)
            if feasible(mid):
                hi = mid
            else:
                lo = mid
        return hi

    def build(self, trees: Mapping[int, FrozenSet[Edge]], method: str, optimal: bool) -> Schedule:
        counts = np.column_stack([self.counts(trees[f.source]) for f in self.flows]) if self.flows \
            else np.zeros((len(self.keys), 0))
        D = np.array([self.tree_delay(f.source, trees[f.source]) for f in self.flows])
        tau = self.min_time(counts, D) if self.flows else 0.0
        if not math.isfinite(tau):
            raise InfeasibleDemandError("routing crosses a category with zero capacity")
        paths, rates, link_rates = {}, {}, {}
        for h, f in enumerate(self.flows):
            tp = tree_paths(f.source, trees[f.source])
            for k in f.targets:
                paths[(f.source, k)] = tp[k]
            d = f.size / (tau - D[h]) if tau > D[h] else self.big_m
            rates[f.source] = min(d, self.big_m)
            link_rates[f.source] = {e: rates[f.source] for e in trees[f.source]}
        return Schedule(self.flows, dict(trees), paths, rates, link_rates, tau, self.big_m,
                        method, optimal)


def _star(flow: Flow) -> FrozenSet[Edge]:
    return frozenset((flow.source, k) for k in flow.targets)


def direct_path_schedule(flows: Iterable[Flow], view, delays: Optional[Mapping[Edge, float]] = None) -> Schedule:
    """Every flow sent straight along the underlay paths ``s -> k``."""
    flows = _check_flows(flows)
    model = _RateModel(flows, view, delays)
    return model.build({f.source: _star(f) for f in flows}, "direct", False)


def _check_reachable(flows, edges):
    adj: Dict[int, List[int]] = {}
    for i, j in edges:
        adj.setdefault(i, []).append(j)
    for f in flows:
        seen, stack = {f.source}, [f.source]
        while stack:
            v = stack.pop()
            for u in adj.get(v, ()):
                if u not in seen:
                    seen.add(u)
                    stack.append(u)
        missing = sorted(f.targets - seen)
        if missing:
            raise InfeasibleDemandError(
                f"flow from agent {f.source} cannot reach {missing} over the overlay")


def enumerate_arborescences(source: int, targets: FrozenSet[int], m: int,
                            edges: FrozenSet[Edge]):
    """Yield every Steiner arborescence rooted at ``source`` whose leaves are
    destinations (relays always have a child)."""
    others = [v for v in range(m) if v != source and v not in targets]
    for r in range(len(others) + 1):
        for relays in itertools.combinations(others, r):
            relays = set(relays)
            S = sorted(targets | relays)
            members = set(S) | {source}
            choices = [[u for u in sorted(members) if u != v and (u, v) in edges] for v in S]
            if any(not c for c in choices):
                continue
            for parents in itertools.product(*choices):
                par = dict(zip(S, parents))
                if relays and not relays <= set(parents):
                    continue
                ok = True
                for v in S:
                    u, steps = v, 0
                    while u != source:
                        u = par[u]
                        steps += 1
                        if steps > len(S):
                            ok = False
                            break
                    if not ok:
                        break
                if ok:
                    yield frozenset((par[v], v) for v in S)


def _pareto(cands: List[Tuple[np.ndarray, float, FrozenSet[Edge]]]):
    """Drop candidates whose load vector and delay are dominated by another."""
    cands = sorted(cands, key=lambda c: (c[0].sum(), c[1], sorted(c[2])))
    kept: List[Tuple[np.ndarray, float, FrozenSet[Edge]]] = []
    loads = []
    for c in cands:
        if loads:
            L = np.array(loads)
            dom = np.all(L[:, :-1] <= c[0], axis=1) & (L[:, -1] <= c[1])
            if dom.any():
                continue
        kept.append(c)
        loads.append(np.append(c[0], c[1]))
    return kept


def _exact(model: _RateModel, edges, m, max_nodes) -> Tuple[Dict[int, FrozenSet[Edge]], bool]:
    flows = model.flows
    per_flow = []
    for f in flows:
        cands = [(model.counts(t), model.tree_delay(f.source, t), t)
                 for t in enumerate_arborescences(f.source, f.targets, m, edges)]
        per_flow.append(_pareto(cands))
    H = len(flows)
    kappa = model.kappa
    min_counts = np.column_stack([np.min([c[0] for c in cs], axis=0) for cs in per_flow])
    min_delay = np.array([min(c[1] for c in cs) for cs in per_flow])
    order = sorted(range(H), key=lambda h: (-len(flows[h].targets), len(per_flow[h]), h))
    for h in order:
        per_flow[h].sort(key=lambda c: (float(np.max(c[0] * kappa[h] / np.maximum(model.cap, 1e-300))), c[1]))

    incumbent = {f.source: _star(f) for f in flows}
    counts0 = np.column_stack([model.counts(incumbent[f.source]) for f in flows])
    D0 = np.array([model.tree_delay(f.source, incumbent[f.source]) for f in flows])
    best = [model.min_time(counts0, D0), dict(incumbent)]
    counts = min_counts.copy()
    D = min_delay.copy()
    chosen: Dict[int, FrozenSet[Edge]] = {}
    visited = [0]
    complete = [True]

    def dfs(pos):
        visited[0] += 1
        if visited[0] > max_nodes:
            complete[0] = False
            return
        if pos == H:
            tau = model.min_time(counts, D)
            if tau < best[0] * (1 - 1e-12):
                best[0] = tau
                best[1] = {flows[h].source: chosen[h] for h in range(H)}
            return
        h = order[pos]
        for c, d, t in per_flow[h]:
            counts[:, h] = c
            D[h] = d
            if model.min_time(counts, D) >= best[0] * (1 - 1e-12):
                continue
            chosen[h] = t
            dfs(pos + 1)
            if not complete[0]:
                break
        counts[:, h] = min_counts[:, h]
        D[h] = min_delay[h]

    dfs(0)
    return best[1], complete[0]


class _LocalSearch:
    """Tree-editing hill climber on (tau, smoothed utilisation)."""

    def __init__(self, model: _RateModel, edges, m):
        self.model = model
        self.edges = edges
        self.m = m

    def score(self, trees) -> Tuple[float, float]:
        model = self.model
        counts = np.column_stack([model.counts(trees[f.source]) for f in model.flows])
        D = np.array([model.tree_delay(f.source, trees[f.source]) for f in model.flows])
        tau = model.min_time(counts, D)
        util = (counts @ model.kappa) / np.maximum(model.cap, 1e-300)
        top = util.max(initial=0.0)
        phi = float(np.sum((util / top) ** 8)) if top > 0 else 0.0
        return tau, phi

    @staticmethod
    def _prune(tree: Dict[int, int], targets) -> Dict[int, int]:
        while True:
            parents = set(tree.values())
            dead = [v for v in tree if v not in parents and v not in targets]
            if not dead:
                return tree
            for v in dead:
                del tree[v]

    def _moves(self, source, targets, parent: Dict[int, int]):
        edges = self.edges
        nodes = set(parent) | {source}
        children: Dict[int, List[int]] = {}
        for v, p in parent.items():
            children.setdefault(p, []).append(v)

        def subtree(v):
            out, stack = {v}, [v]
            while stack:
                for c in children.get(stack.pop(), ()):
                    out.add(c)
                    stack.append(c)
            return out

        for v in sorted(parent):
            sub = subtree(v)
            for u in sorted(nodes - sub):
                if u != parent[v] and (u, v) in edges:
                    new = dict(parent)
                    new[v] = u
                    yield new
            for w in range(self.m):
                if w in nodes:
                    continue
                for u in sorted(nodes - sub):
                    if (u, w) in edges and (w, v) in edges:
                        new = dict(parent)
                        new[w] = u
                        new[v] = w
                        yield new

    def run(self, trees: Dict[int, FrozenSet[Edge]], max_passes: int = 50):
        best = dict(trees)
        tau, phi = self.score(best)
        for _ in range(max_passes):
            improved = False
            for f in self.model.flows:
                parent = {j: i for i, j in best[f.source]}
                for new in self._moves(f.source, f.targets, parent):
                    new = self._prune(new, f.targets)
                    cand = dict(best)
                    cand[f.source] = frozenset((p, v) for v, p in new.items())
                    t2, p2 = self.score(cand)
                    if t2 < tau * (1 - 1e-12) or (t2 <= tau * (1 + 1e-12) and p2 < phi * (1 - 1e-9)):
                        best, tau, phi = cand, t2, p2
                        improved = True
                        break
            if not improved:
                break
        return best, tau


def _relaxation_trees(model: _RateModel, edges, m, n_samples, rng):
    """LP relaxation of the Steiner routing plus randomized path rounding."""
    flows = model.flows
    E = sorted(edges)
    eidx = {e: k for k, e in enumerate(E)}
    nE = len(E)
    commodities = [(h, k) for h, f in enumerate(flows) for k in sorted(f.targets)]
    nR = len(commodities) * nE
    nZ = len(flows) * nE
    nvar = nR + nZ + 1
    mu = nvar - 1
    eq_rows, eq_cols, eq_vals, b_eq = [], [], [], []
    row = 0
    for c, (h, k) in enumerate(commodities):
        s = flows[h].source
        for i in range(m):
            b_eq.append(1.0 if i == s else (-1.0 if i == k else 0.0))
        for e, q in eidx.items():
            eq_rows += [row + e[0], row + e[1]]
            eq_cols += [c * nE + q, c * nE + q]
            eq_vals += [1.0, -1.0]
        row += m
    A_eq = sparse.csr_matrix((eq_vals, (eq_rows, eq_cols)), shape=(row, nvar))
    ub_rows, ub_cols, ub_vals, b_ub = [], [], [], []
    row = 0
    for c, (h, _) in enumerate(commodities):
        for q in range(nE):
            ub_rows += [row, row]
            ub_cols += [c * nE + q, nR + h * nE + q]
            ub_vals += [1.0, -1.0]
            b_ub.append(0.0)
            row += 1
    for r, F in enumerate(model.keys):
        for e in F:
            q = eidx.get(e)
            if q is None:
                continue
            for h in range(len(flows)):
                ub_rows.append(row)
                ub_cols.append(nR + h * nE + q)
                ub_vals.append(model.kappa[h])
        ub_rows.append(row)
        ub_cols.append(mu)
        ub_vals.append(-model.cap[r])
        b_ub.append(0.0)
        row += 1
    A_ub = sparse.csr_matrix((ub_vals, (ub_rows, ub_cols)), shape=(row, nvar))
    cost = np.zeros(nvar)
    cost[mu] = 1.0
    scale = 1e-6 / max(model.big_m, 1e-300)
    for h in range(len(flows)):
        cost[nR + h * nE: nR + (h + 1) * nE] = scale * model.kappa[h]
    bounds = [(0, 1)] * (nR + nZ) + [(0, None)]
    res = linprog(cost, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status != 0:
        return []
    x = res.x
    out_links: Dict[int, List[Edge]] = {}
    for e in E:
        out_links.setdefault(e[0], []).append(e)

    def sample_path(c, s, k, greedy):
        flow = x[c * nE:(c + 1) * nE]
        v, path, seen = s, [s], {s}
        while v != k:
            opts = [e for e in out_links.get(v, ()) if e[1] not in seen and flow[eidx[e]] > 1e-9]
            if not opts:
                return None
            w = np.array([flow[eidx[e]] for e in opts])
            e = opts[int(np.argmax(w))] if greedy else opts[rng.choice(len(opts), p=w / w.sum())]
            v = e[1]
            path.append(v)
            seen.add(v)
        return path

    samples = []
    for n in range(n_samples):
        greedy = n == 0
        trees = {}
        c0 = 0
        for h, f in enumerate(flows):
            ks = sorted(f.targets)
            cidx = {k: c0 + q for q, k in enumerate(ks)}
            c0 += len(ks)
            order = ks if greedy else [ks[q] for q in rng.permutation(len(ks))]
            parent: Dict[int, int] = {}
            for k in order:
                if k in parent:
                    continue
                path = sample_path(cidx[k], f.source, k, greedy)
                if path is None:
                    path = [f.source, k]
                last = max(q for q, v in enumerate(path) if v == f.source or v in parent)
                for q in range(last + 1, len(path)):
                    parent[path[q]] = path[q - 1]
            trees[f.source] = frozenset((p, v) for v, p in parent.items())
        samples.append(trees)
    return samples


def min_time_schedule(flows: Iterable[Flow], edges: Iterable[Edge], view,
                      delays: Optional[Mapping[Edge, float]] = None, *, mode: str = "auto",
                      seed=0, n_samples: int = 16, max_nodes: int = 2_000_000,
                      local_search: bool = True) -> Schedule:
    """Jointly choose overlay multicast trees and rates minimising completion time.

    ``mode="exact"`` runs branch-and-bound over Steiner arborescences (rates for
    each routing come from the category bottleneck); ``"heuristic"`` rounds an
    LP relaxation of the routing and improves the result by local search.
    ``"auto"`` picks exact for at most 6 agents and 6 flows.  The direct
    schedule is always a candidate, so the result never exceeds it.
    """
    flows = _check_flows(flows)
    edges = frozenset(edges)
    m = 1 + max((max(i, j) for i, j in edges), default=max((f.source for f in flows), default=0))
    for f in flows:
        m = max(m, 1 + max(f.targets))
    _check_reachable(flows, edges)
    model = _RateModel(flows, view, delays)
    if not flows:
        return model.build({}, "empty", True)
    if mode == "auto":
        mode = "exact" if (m <= 6 and len(flows) <= 6) else "heuristic"
    direct = {f.source: _star(f) for f in flows}
    if any(not _star(f) <= edges for f in flows):
        direct = None
    if mode == "exact":
        trees, complete = _exact(model, edges, m, max_nodes)
        if not complete:
            warnings.warn("branch-and-bound node budget exhausted; schedule may be suboptimal",
                          RuntimeWarning)
        return model.build(trees, "exact", complete)
    if mode != "heuristic":
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    search = _LocalSearch(model, edges, m)
    candidates = _relaxation_trees(model, edges, m, n_samples, rng)
    if direct is not None:
        candidates.insert(0, direct)
    if not candidates:
        raise InfeasibleDemandError("no routing found for the demand set")
    scored = sorted(((search.score(t)[0], n) for n, t in enumerate(candidates)))
    best = candidates[scored[0][1]]
    best_tau = scored[0][0]
    if local_search:
        starts = [candidates[n] for _, n in scored[:2]]
        for start in starts:
            trees, tau = search.run(start)
            if tau < best_tau * (1 - 1e-12):
                best, best_tau = trees, tau
    return model.build(best, "heuristic", False)


def _routing_of(routing) -> Tuple[Dict[int, FrozenSet[Edge]], Optional[Tuple[Flow, ...]]]:
    if isinstance(routing, Schedule):
        return dict(routing.trees), routing.flows
    return {s: frozenset(t) for s, t in routing.items()}, None


def equal_share_time(routing, view, size: Optional[float] = None,
                     delays: Optional[Mapping[Edge, float]] = None) -> float:
    """Completion time when every category is shared equally by its unicasts.

    Valid only with zero delays and a common flow size; ``routing`` is a
    :class:`Schedule` or a mapping from source to tree links.
    """
    trees, flows = _routing_of(routing)
    if flows is not None:
        sizes = {f.size for f in flows}
        if len(sizes) > 1:
            raise ValueError("equal_share_time needs a common flow size")
        if size is None:
            size = sizes.pop() if sizes else 1.0
        elif sizes and not math.isclose(size, next(iter(sizes))):
            raise ValueError("size disagrees with the schedule's flow size")
    if size is None:
        raise ValueError("size is required when routing is not a Schedule")
    used = {e for t in trees.values() for e in t}
    if delays and any(delays.get(e, 0.0) != 0 for e in used):
        raise ValueError("equal_share_time needs zero propagation delay on every used link")
    best = math.inf
    for F, cap in _caps(view).items():
        t_F = sum(len(t & F) for t in trees.values())
        if t_F:
            best = min(best, cap / t_F)
    if best == math.inf:
        return 0.0
    return size / best if best > 0 else math.inf


def simulate_completion(schedule: Schedule, table: CategoryTable,
                        delays: Optional[Mapping[Edge, float]] = None) -> float:
    """Fluid simulation on the true underlay links of ``table``.

    Each activated unicast (one tree link of one flow) gets an equal share of
    every underlay link it crosses; a multicast advances at the rate of its
    slowest unicast.  Shares are recomputed whenever a flow finishes.  Returns
    the time the last destination has the data, propagation included.
    """
    links_of: Dict[Edge, List[Tuple[int, float]]] = {}
    for F, cat in table.categories.items():
        for e in F:
            links_of.setdefault(e, []).extend(zip(cat.links, cat.link_capacities))
    flows = {f.source: f for f in schedule.flows}
    remaining = {s: flows[s].size for s in schedule.trees if schedule.trees[s]}
    for s in remaining:
        for e in schedule.trees[s]:
            if e not in links_of:
                raise ValueError(f"overlay link {e} is not covered by the category table")
    finish: Dict[int, float] = {}
    t = 0.0
    while remaining:
        count: Dict[int, int] = {}
        for s in remaining:
            for e in schedule.trees[s]:
                for k, _ in links_of[e]:
                    count[k] = count.get(k, 0) + 1
        rate = {}
        for s in remaining:
            rate[s] = min(c / count[k] for e in schedule.trees[s] for k, c in links_of[e])
        dt = min(remaining[s] / rate[s] for s in remaining)
        t += dt
        done = []
        for s in list(remaining):
            remaining[s] -= rate[s] * dt
            if remaining[s] <= flows[s].size * 1e-12:
                done.append(s)
        for s in done:
            finish[s] = t
            del remaining[s]
    worst = 0.0
    for s, f in flows.items():
        base = finish.get(s, 0.0)
        for k in f.targets:
            worst = max(worst, base + _path_delay(schedule.paths.get((s, k), ()), delays))
    return worst


@dataclass(frozen=True)
class Violation:
    constraint: str
    index: tuple
    slack: float


def validate_schedule(schedule: Schedule, view, delays: Optional[Mapping[Edge, float]] = None,
                      tol: float = 1e-9) -> List[Violation]:
    """List every violated scheduling constraint with its (negative) slack."""
    out: List[Violation] = []
    caps = _caps(view)
    M = schedule.big_m
    nodes = set()
    for f in schedule.flows:
        nodes |= {f.source} | set(f.targets)
    for t in schedule.trees.values():
        for i, j in t:
            nodes |= {i, j}
    for f in schedule.flows:
        s = f.source
        d = schedule.rates.get(s, 0.0)
        tree = schedule.trees.get(s, frozenset())
        f_rates = schedule.link_rates.get(s, {})
        if d < -tol or d > M * (1 + tol):
            out.append(Violation("rate_bound", (s,), min(d, M - d)))
        for k in sorted(f.targets):
            path = schedule.paths.get((s, k), ())
            need = (f.size / d if d > 0 else math.inf) + _path_delay(path, delays)
            slack = schedule.tau - need
            if slack < -tol * max(1.0, schedule.tau):
                out.append(Violation("time", (s, k), slack))
            flow_out: Dict[int, int] = {}
            for i, j in path:
                flow_out[i] = flow_out.get(i, 0) + 1
                flow_out[j] = flow_out.get(j, 0) - 1
            for i in sorted(nodes):
                b = 1 if i == s else (-1 if i == k else 0)
                imbalance = flow_out.get(i, 0) - b
                if imbalance:
                    out.append(Violation("conservation", (s, k, i), -abs(float(imbalance))))
            for e in path:
                if e not in tree:
                    out.append(Violation("tree", (s, k, e), -1.0))
        for e in sorted(set(tree) | set(f_rates)):
            fe = f_rates.get(e, 0.0)
            if e in tree:
                gap = -abs(fe - d)
                if gap < -tol * max(1.0, d):
                    out.append(Violation("rate_match", (s, e), gap))
            elif fe > tol:
                out.append(Violation("no_flow", (s, e), -fe))
    for F in sorted(caps, key=category_sort_key):
        load = sum(schedule.link_rates.get(s, {}).get(e, 0.0) for s in schedule.trees for e in F)
        slack = caps[F] - load
        if slack < -tol * max(1.0, caps[F]):
            out.append(Violation("capacity", (tuple(sorted(F)),), slack))
    return out
