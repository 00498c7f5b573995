"""Random small instances shared by the test modules."""
from __future__ import annotations

import itertools

import numpy as np

from overlaydfl.topology import DesignProblem
from overlaydfl.underlay import (InferredView, Link, OverlaySpec, RoutingTable, Scenario, UnderlayGraph,
                                 derive_categories, shortest_path_routing)


def random_underlay(rng: np.random.Generator, n_nodes: int, extra: int = 2, capacities=(1.0, 2.0, 3.0, 4.0),
                    delay: float = 0.0) -> UnderlayGraph:
    """Connected bidirectional graph: random tree plus ``extra`` random chords.

    Each direction draws its own capacity from ``capacities``.
    """
    pairs = set()
    order = rng.permutation(n_nodes)
    for k in range(1, n_nodes):
        a, b = int(order[k]), int(order[rng.integers(0, k)])
        pairs.add((min(a, b), max(a, b)))
    others = [p for p in itertools.combinations(range(n_nodes), 2) if p not in pairs]
    for idx in rng.permutation(len(others))[:extra]:
        pairs.add(others[idx])
    links = []
    for a, b in sorted(pairs):
        for s, d in ((a, b), (b, a)):
            links.append(Link(s, d, float(rng.choice(capacities)), delay))
    return UnderlayGraph(tuple(range(n_nodes)), tuple(links))


def random_scenario(rng: np.random.Generator, m: int, n_nodes: int = None, extra: int = 2, **kw) -> Scenario:
    n_nodes = n_nodes if n_nodes is not None else m + int(rng.integers(0, 3))
    under = random_underlay(rng, n_nodes, extra, **kw)
    hosts = rng.choice(n_nodes, size=m, replace=False)
    agents = tuple((f"a{k}", int(h)) for k, h in enumerate(hosts))
    return Scenario(under, OverlaySpec.clique(agents), "random")


def random_simple_path(rng: np.random.Generator, under: UnderlayGraph, src, dst):
    """Random simple underlay path (link indices) found by randomized DFS."""
    out = under.out_links()
    stack = [(src, [], {src})]
    while stack:
        node, path, seen = stack.pop()
        if node == dst:
            return tuple(path)
        nxt = list(out.get(node, []))
        rng.shuffle(nxt)
        for k in nxt:
            v = under.links[k].dst
            if v not in seen:
                stack.append((v, path + [k], seen | {v}))
    raise ValueError("no path")


def random_routing(rng: np.random.Generator, scenario: Scenario) -> RoutingTable:
    nodes = scenario.overlay.agent_nodes
    paths = {(i, j): random_simple_path(rng, scenario.underlay, nodes[i], nodes[j])
             for i, j in scenario.overlay.directed}
    return RoutingTable(scenario.underlay, paths)


def design_problem(scenario: Scenario, size: float = 1.0, view=None, alpha0=None) -> DesignProblem:
    routing = shortest_path_routing(scenario.underlay, scenario.overlay)
    if view is None:
        view = InferredView.from_table(derive_categories(routing))
    return DesignProblem.from_overlay(scenario.overlay, routing, view, size, alpha0=alpha0)


def all_subsets(n: int):
    for mask in range(1 << n):
        yield np.array([(mask >> q) & 1 for q in range(n)], dtype=float)


def brute_arborescences(source: int, targets, edges):
    """All edge subsets forming an arborescence rooted at ``source`` that
    reaches every target (relay leaves allowed), by plain subset enumeration."""
    edges = sorted(edges)
    targets = set(targets)
    out = []
    for mask in range(1, 1 << len(edges)):
        sub = [edges[q] for q in range(len(edges)) if (mask >> q) & 1]
        heads = [j for _, j in sub]
        if len(set(heads)) != len(heads) or source in heads:
            continue
        nodes = {source} | {i for i, _ in sub} | set(heads)
        if not targets <= nodes:
            continue
        reach, frontier = {source}, [source]
        while frontier:
            v = frontier.pop()
            for i, j in sub:
                if i == v and j not in reach:
                    reach.add(j)
                    frontier.append(j)
        if reach == nodes:
            out.append(frozenset(sub))
    return out


def bottleneck_time(trees, capacities, size):
    """size * max_F t_F / C_F for unicasts given by ``trees`` (dict source -> links)."""
    worst = 0.0
    for F, cap in capacities.items():
        t = sum(len(tree & F) for tree in trees.values())
        if t:
            worst = max(worst, t / cap)
    return size * worst
