"""Physical network model, overlay placement, routing and link categories.

Agents are addressed internally by their position ``0..m-1`` in
:attr:`OverlaySpec.agents`; overlay links are ``(i, j)`` index pairs.
Underlay links are addressed by their position in :attr:`UnderlayGraph.links`.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Hashable, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

OverlayLink = Tuple[int, int]
CategoryKey = FrozenSet[OverlayLink]


class ScenarioError(ValueError):
    """Raised when a scenario file or object violates the scenario schema."""


def node_sort_key(node):
    # ints order numerically, everything else by its string form
    if isinstance(node, (int, np.integer)) and not isinstance(node, bool):
        return (0, int(node), "")
    return (1, 0, str(node))


def category_sort_key(key: CategoryKey):
    return (len(key), tuple(sorted(key)))


@dataclass(frozen=True)
class Link:
    src: Hashable
    dst: Hashable
    capacity: float
    delay: float = 0.0


@dataclass(frozen=True)
class UnderlayGraph:
    nodes: Tuple[Hashable, ...]
    links: Tuple[Link, ...]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "links", tuple(self.links))
        if len(set(self.nodes)) != len(self.nodes):
            raise ScenarioError("nodes: node ids must be unique")
        declared = set(self.nodes)
        seen = set()
        for k, ln in enumerate(self.links):
            if ln.src not in declared or ln.dst not in declared:
                raise ScenarioError(f"links[{k}]: endpoint not a declared node ({ln.src!r}, {ln.dst!r})")
            if ln.src == ln.dst:
                raise ScenarioError(f"links[{k}]: self-loop on {ln.src!r}")
            if not (ln.capacity > 0) or not math.isfinite(ln.capacity):
                raise ScenarioError(f"links[{k}].capacity_bps: must be finite and > 0, got {ln.capacity!r}")
            if not (ln.delay >= 0) or not math.isfinite(ln.delay):
                raise ScenarioError(f"links[{k}].delay_s: must be finite and >= 0, got {ln.delay!r}")
            if (ln.src, ln.dst) in seen:
                raise ScenarioError(f"links[{k}]: duplicate link ({ln.src!r}, {ln.dst!r})")
            seen.add((ln.src, ln.dst))

    @property
    def capacities(self) -> np.ndarray:
        return np.array([ln.capacity for ln in self.links], dtype=float)

    def out_links(self) -> Dict[Hashable, List[int]]:
        out: Dict[Hashable, List[int]] = {v: [] for v in self.nodes}
        for k, ln in enumerate(self.links):
            out[ln.src].append(k)
        return out

    def in_links(self) -> Dict[Hashable, List[int]]:
        inc: Dict[Hashable, List[int]] = {v: [] for v in self.nodes}
        for k, ln in enumerate(self.links):
            inc[ln.dst].append(k)
        return inc

    def undirected_degree(self) -> Dict[Hashable, int]:
        nbrs: Dict[Hashable, set] = {v: set() for v in self.nodes}
        for ln in self.links:
            nbrs[ln.src].add(ln.dst)
            nbrs[ln.dst].add(ln.src)
        return {v: len(s) for v, s in nbrs.items()}


@dataclass(frozen=True)
class OverlaySpec:
    """Agents placed on underlay nodes plus the directed base topology ``E``."""

    agents: Tuple[Tuple[Hashable, Hashable], ...]
    edges: FrozenSet[OverlayLink]

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple((a, n) for a, n in self.agents))
        object.__setattr__(self, "edges", frozenset((int(i), int(j)) for i, j in self.edges))
        if not self.agents:
            raise ScenarioError("agents: at least one agent is required")
        ids = [a for a, _ in self.agents]
        if len(set(ids)) != len(ids):
            raise ScenarioError("agents: agent ids must be unique")
        nodes = [n for _, n in self.agents]
        if len(set(nodes)) != len(nodes):
            raise ScenarioError("agents: agents must sit on distinct underlay nodes")
        m = len(self.agents)
        for i, j in self.edges:
            if i == j:
                raise ScenarioError(f"base_topology: self-loop on agent {ids[i]!r}")
            if not (0 <= i < m and 0 <= j < m):
                raise ScenarioError(f"base_topology: link ({i}, {j}) out of range")
            if (j, i) not in self.edges:
                raise ScenarioError(f"base_topology: link ({ids[i]!r}, {ids[j]!r}) lacks its reverse")

    @classmethod
    def clique(cls, agents: Sequence[Tuple[Hashable, Hashable]]) -> "OverlaySpec":
        m = len(agents)
        return cls(tuple(agents), frozenset((i, j) for i in range(m) for j in range(m) if i != j))

    @classmethod
    def from_pairs(cls, agents, pairs: Iterable[Tuple[Hashable, Hashable]]) -> "OverlaySpec":
        """Build from undirected agent-id pairs; both directions are added."""
        index = {a: k for k, (a, _) in enumerate(agents)}
        edges = set()
        for a, b in pairs:
            if a not in index or b not in index:
                raise ScenarioError(f"base_topology: unknown agent in pair ({a!r}, {b!r})")
            edges.add((index[a], index[b]))
            edges.add((index[b], index[a]))
        return cls(tuple(agents), frozenset(edges))

    @property
    def m(self) -> int:
        return len(self.agents)

    @property
    def agent_ids(self) -> List[Hashable]:
        return [a for a, _ in self.agents]

    @property
    def agent_nodes(self) -> List[Hashable]:
        return [n for _, n in self.agents]

    @property
    def directed(self) -> List[OverlayLink]:
        return sorted(self.edges)

    @property
    def undirected(self) -> List[OverlayLink]:
        return sorted((i, j) for i, j in self.edges if i < j)


@dataclass(frozen=True)
class RoutingTable:
    underlay: UnderlayGraph
    paths: Mapping[OverlayLink, Tuple[int, ...]]

    @property
    def delays(self) -> Dict[OverlayLink, float]:
        links = self.underlay.links
        return {e: float(sum(links[k].delay for k in p)) for e, p in self.paths.items()}

    def hops(self, e: OverlayLink) -> int:
        return len(self.paths[e])

    def node_path(self, e: OverlayLink) -> List[Hashable]:
        links = self.underlay.links
        p = self.paths[e]
        if not p:
            return []
        return [links[p[0]].src] + [links[k].dst for k in p]


@dataclass(frozen=True)
class Category:
    links: Tuple[int, ...]
    link_capacities: Tuple[float, ...]

    @property
    def capacity(self) -> float:
        return min(self.link_capacities)


@dataclass(frozen=True)
class CategoryTable:
    """Nonempty categories keyed by the set of directed overlay links that
    traverse exactly their member underlay links."""

    categories: Mapping[CategoryKey, Category]

    def capacities(self) -> Dict[CategoryKey, float]:
        return {F: c.capacity for F, c in self.categories.items()}

    def keys(self) -> List[CategoryKey]:
        return sorted(self.categories, key=category_sort_key)

    def __len__(self):
        return len(self.categories)


@dataclass(frozen=True)
class InferredView:
    """Category index set and capacities as seen by the overlay."""

    capacities: Mapping[CategoryKey, float]
    provenance: str = "exact"

    @classmethod
    def from_table(cls, table: CategoryTable) -> "InferredView":
        return cls(table.capacities(), "exact")

    def keys(self) -> List[CategoryKey]:
        return sorted(self.capacities, key=category_sort_key)

    def is_safe_for(self, table: CategoryTable, rtol: float = 1e-12) -> bool:
        """True iff every true category is present and not overestimated."""
        for F, c in table.capacities().items():
            if F not in self.capacities:
                return False
            if self.capacities[F] > c * (1 + rtol):
                return False
        return True

    def __len__(self):
        return len(self.capacities)


@dataclass(frozen=True)
class Scenario:
    underlay: UnderlayGraph
    overlay: OverlaySpec
    name: str = "scenario"
    meta: Mapping = field(default_factory=dict)


def shortest_path_routing(underlay: UnderlayGraph, overlay: OverlaySpec) -> RoutingTable:
    """Minimum-hop routing for every directed overlay link.

    Among equal-hop paths the lexicographically smallest node sequence wins.
    """
    out = underlay.out_links()
    inc = underlay.in_links()
    links = underlay.links
    for v in out:
        out[v].sort(key=lambda k: node_sort_key(links[k].dst))
    nodes = overlay.agent_nodes
    dist_to: Dict[Hashable, Dict[Hashable, int]] = {}
    for t in set(nodes[j] for _, j in overlay.edges):
        dist = {t: 0}
        queue = deque([t])
        while queue:
            v = queue.popleft()
            for k in inc[v]:
                u = links[k].src
                if u not in dist:
                    dist[u] = dist[v] + 1
                    queue.append(u)
        dist_to[t] = dist
    paths = {}
    ids = overlay.agent_ids
    for i, j in overlay.directed:
        s, t = nodes[i], nodes[j]
        dist = dist_to[t]
        if s not in dist:
            raise ValueError(f"agents {ids[i]!r} and {ids[j]!r} are not connected in the underlay")
        path = []
        v = s
        while v != t:
            # out-links are pre-sorted by head node, so the first match is lexicographically smallest
            k = next(k for k in out[v] if dist.get(links[k].dst, -1) == dist[v] - 1)
            path.append(k)
            v = links[k].dst
        paths[(i, j)] = tuple(path)
    return RoutingTable(underlay, paths)


def derive_categories(routing: RoutingTable, edges: Optional[Iterable[OverlayLink]] = None) -> CategoryTable:
    edges = sorted(routing.paths) if edges is None else sorted(edges)
    users: Dict[int, set] = {}
    for e in edges:
        for k in routing.paths[e]:
            users.setdefault(k, set()).add(e)
    grouped: Dict[CategoryKey, List[int]] = {}
    for k in sorted(users):
        grouped.setdefault(frozenset(users[k]), []).append(k)
    caps = routing.underlay.links
    return CategoryTable({
        F: Category(tuple(ks), tuple(caps[k].capacity for k in ks)) for F, ks in grouped.items()
    })


def perturb_view(exact: CategoryTable, mode: str = "exact", *, p_drop: float = 0.0,
                 factor: float = 1.0, seed=None) -> InferredView:
    """Emulate tomography error on an exact category table.

    ``mode`` is one of ``"exact"``, ``"drop_categories"`` (each category is
    missed independently with probability ``p_drop``) or ``"scale_capacity"``
    (every capacity multiplied by ``factor``).
    """
    if mode == "exact":
        return InferredView.from_table(exact)
    if mode in ("drop", "drop_categories"):
        if not 0 <= p_drop < 1:
            raise ValueError(f"p_drop must lie in [0, 1), got {p_drop}")
        rng = np.random.default_rng(seed)
        keys = exact.keys()
        keep = rng.random(len(keys)) >= p_drop
        caps = exact.capacities()
        return InferredView({F: caps[F] for F, k in zip(keys, keep) if k}, "perturbed")
    if mode in ("scale", "scale_capacity"):
        if not factor > 0:
            raise ValueError(f"factor must be > 0, got {factor}")
        return InferredView({F: c * factor for F, c in exact.capacities().items()}, "perturbed")
    raise ValueError(f"unknown perturbation mode {mode!r}")


# ---------------------------------------------------------------- scenarios

ROOFNET_NODES, ROOFNET_LINKS, ROOFNET_CAPACITY = 33, 187, 1e6
IAB_NODES, IAB_LINKS, IAB_CAPACITY = 19, 56, 0.4e9


def _pick_agents(underlay: UnderlayGraph, n_agents: int, rng) -> List[Hashable]:
    deg = underlay.undirected_degree()
    jitter = rng.random(len(underlay.nodes))
    order = sorted(range(len(underlay.nodes)),
                   key=lambda k: (deg[underlay.nodes[k]], jitter[k]))
    return sorted((underlay.nodes[k] for k in order[:n_agents]), key=node_sort_key)


def _scenario_from_pairs(name, n_nodes, pairs, one_way, capacity, delay, n_agents, rng, seed):
    links = []
    for a, b in pairs:
        links.append(Link(a, b, capacity, delay))
        links.append(Link(b, a, capacity, delay))
    for a, b in one_way:
        links.append(Link(a, b, capacity, delay))
    underlay = UnderlayGraph(tuple(range(n_nodes)), tuple(links))
    agent_nodes = _pick_agents(underlay, n_agents, rng)
    overlay = OverlaySpec.clique([(f"a{k}", v) for k, v in enumerate(agent_nodes)])
    return Scenario(underlay, overlay, name, {"generator": name, "seed": seed})


def roofnet_like(seed: int = 0, n_agents: int = 10, delay: float = 0.0,
                 capacity: float = ROOFNET_CAPACITY) -> Scenario:
    """Mesh with 33 nodes and 187 directed links of uniform capacity.

    Nodes are scattered in the unit square; a Euclidean spanning tree keeps
    the mesh connected and the remaining pairs are added shortest-first, which
    leaves low-degree nodes on the periphery.  187 is odd, so one extra link
    is one-way.
    """
    rng = np.random.default_rng(seed)
    n = ROOFNET_NODES
    pos = rng.random((n, 2))
    pairs = _geometric_pairs(pos, (ROOFNET_LINKS - 1) // 2)
    existing = set(pairs)
    extra = next((a, b) for a, b in _pairs_by_length(pos) if (a, b) not in existing)
    return _scenario_from_pairs("roofnet-like", n, sorted(pairs), [extra], capacity, delay,
                                n_agents, rng, seed)


def iab_like(seed: int = 0, n_agents: int = 10, delay: float = 0.0,
             capacity: float = IAB_CAPACITY) -> Scenario:
    """Hexagonal 19-site layout (two rings around a donor) with 56 directed links."""
    rng = np.random.default_rng(seed)
    cells = [(q, r) for q in range(-2, 3) for r in range(-2, 3) if abs(q + r) <= 2]
    index = {c: k for k, c in enumerate(cells)}
    adjacent = set()
    for (q, r), k in index.items():
        for dq, dr in ((1, 0), (0, 1), (-1, 1)):
            nb = (q + dq, r + dr)
            if nb in index:
                adjacent.add(tuple(sorted((k, index[nb]))))
    adjacent = sorted(adjacent)
    # random spanning tree grown from the donor at the centre
    donor = index[(0, 0)]
    in_tree = {donor}
    tree = []
    while len(in_tree) < len(cells):
        frontier = [p for p in adjacent if (p[0] in in_tree) != (p[1] in in_tree)]
        p = frontier[rng.integers(len(frontier))]
        tree.append(p)
        in_tree.update(p)
    rest = [p for p in adjacent if p not in set(tree)]
    chosen = rng.choice(len(rest), IAB_LINKS // 2 - len(tree), replace=False)
    pairs = sorted(tree + [rest[k] for k in chosen])
    return _scenario_from_pairs("iab-like", len(cells), pairs, [], capacity, delay,
                                n_agents, rng, seed)


def _pairs_by_length(pos):
    n = len(pos)
    pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
    return sorted(pairs, key=lambda p: float(np.linalg.norm(pos[p[0]] - pos[p[1]])))


def _geometric_pairs(pos, n_pairs):
    n = len(pos)
    ordered = _pairs_by_length(pos)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    chosen = []
    for a, b in ordered:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
            chosen.append((a, b))
    taken = set(chosen)
    for p in ordered:
        if len(chosen) >= n_pairs:
            break
        if p not in taken:
            chosen.append(p)
            taken.add(p)
    return chosen


GENERATORS = {"roofnet-like": roofnet_like, "iab-like": iab_like}


def scenario_to_dict(scenario: Scenario) -> dict:
    ov = scenario.overlay
    ids = ov.agent_ids
    clique = len(ov.edges) == ov.m * (ov.m - 1)
    return {
        "name": scenario.name,
        "nodes": list(scenario.underlay.nodes),
        "links": [{"src": ln.src, "dst": ln.dst, "capacity_bps": ln.capacity, "delay_s": ln.delay}
                  for ln in scenario.underlay.links],
        "agents": [{"id": a, "node": n} for a, n in ov.agents],
        "base_topology": "clique" if clique else [[ids[i], ids[j]] for i, j in ov.undirected],
    }


def _require(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise ScenarioError(f"{where}: missing required field {key!r}")
    return obj[key]


def scenario_from_dict(data: Mapping, name: str = "scenario") -> Scenario:
    if not isinstance(data, Mapping):
        raise ScenarioError("scenario: top level must be an object")
    if "generator" in data:
        gen = data["generator"]
        if gen not in GENERATORS:
            raise ScenarioError(f"generator: unknown generator {gen!r}; expected one of {sorted(GENERATORS)}")
        kwargs = {k: data[k] for k in ("seed", "n_agents", "delay", "capacity") if k in data}
        try:
            return GENERATORS[gen](**kwargs)
        except TypeError as exc:
            raise ScenarioError(f"generator: bad arguments ({exc})") from None
    nodes = _require(data, "nodes", "scenario")
    if not isinstance(nodes, list):
        raise ScenarioError("nodes: must be a list")
    links = []
    for k, raw in enumerate(_require(data, "links", "scenario")):
        where = f"links[{k}]"
        try:
            links.append(Link(_require(raw, "src", where), _require(raw, "dst", where),
                              float(_require(raw, "capacity_bps", where)), float(raw.get("delay_s", 0.0))))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise ScenarioError(f"{where}: {exc}") from None
    underlay = UnderlayGraph(tuple(nodes), tuple(links))
    agents_raw = _require(data, "agents", "scenario")
    if not isinstance(agents_raw, list) or not agents_raw:
        raise ScenarioError("agents: must be a non-empty list")
    agents = []
    for k, raw in enumerate(agents_raw):
        node = _require(raw, "node", f"agents[{k}]")
        if node not in set(nodes):
            raise ScenarioError(f"agents[{k}].node: {node!r} is not a declared node")
        agents.append((_require(raw, "id", f"agents[{k}]"), node))
    base = data.get("base_topology", "clique")
    if base == "clique":
        overlay = OverlaySpec.clique(agents)
    elif isinstance(base, list):
        for k, p in enumerate(base):
            if not (isinstance(p, (list, tuple)) and len(p) == 2):
                raise ScenarioError(f"base_topology[{k}]: expected a pair of agent ids")
        overlay = OverlaySpec.from_pairs(agents, [tuple(p) for p in base])
    else:
        raise ScenarioError("base_topology: expected \"clique\" or a list of agent-id pairs")
    return Scenario(underlay, overlay, data.get("name", name), {})


def load_scenario(path) -> Scenario:
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    try:
        return scenario_from_dict(data, name=path.stem)
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from None


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(scenario), indent=2))
