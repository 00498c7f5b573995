import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from instances import random_routing, random_scenario
from overlaydfl.underlay import (Link, OverlaySpec, ScenarioError, UnderlayGraph,
                                 derive_categories, iab_like, load_scenario, perturb_view, roofnet_like,
                                 scenario_from_dict, scenario_to_dict, shortest_path_routing)


def _used_links(routing):
    return {k for p in routing.paths.values() for k in p}


def test_roofnet_like_counts():
    sc = roofnet_like(seed=0)
    assert len(sc.underlay.nodes) == 33
    assert len(sc.underlay.links) == 187
    assert {ln.capacity for ln in sc.underlay.links} == {1e6}
    assert sc.overlay.m == 10
    assert len(sc.overlay.edges) == 90


def test_iab_like_counts():
    sc = iab_like(seed=0)
    assert len(sc.underlay.nodes) == 19
    assert len(sc.underlay.links) == 56
    assert {ln.capacity for ln in sc.underlay.links} == {0.4e9}
    assert sc.overlay.m == 10


@pytest.mark.parametrize("gen", [roofnet_like, iab_like])
def test_generators_deterministic(gen):
    assert scenario_to_dict(gen(seed=3)) == scenario_to_dict(gen(seed=3))
    assert scenario_to_dict(gen(seed=3)) != scenario_to_dict(gen(seed=4))


def test_agents_on_low_degree_nodes():
    sc = roofnet_like(seed=1)
    deg = sc.underlay.undirected_degree()
    agent_deg = sorted(deg[n] for n in sc.overlay.agent_nodes)
    others = sorted(deg[n] for n in sc.underlay.nodes if n not in set(sc.overlay.agent_nodes))
    assert max(agent_deg) <= min(others)


def test_shortest_paths_are_minimum_hop():
    rng = np.random.default_rng(0)
    for _ in range(20):
        sc = random_scenario(rng, 4, extra=3)
        routing = shortest_path_routing(sc.underlay, sc.overlay)
        # BFS hop distances as the oracle
        out = sc.underlay.out_links()
        for (i, j), path in routing.paths.items():
            src, dst = sc.overlay.agent_nodes[i], sc.overlay.agent_nodes[j]
            dist, frontier = {src: 0}, [src]
            while frontier:
                nxt = []
                for u in frontier:
                    for k in out.get(u, []):
                        v = sc.underlay.links[k].dst
                        if v not in dist:
                            dist[v] = dist[u] + 1
                            nxt.append(v)
                frontier = nxt
            assert len(path) == dist[dst]
            nodes = routing.node_path((i, j))
            assert nodes[0] == src and nodes[-1] == dst


def test_disconnected_agents_reported():
    under = UnderlayGraph((0, 1, 2), (Link(0, 1, 1.0), Link(1, 0, 1.0)))
    ov = OverlaySpec.clique((("a", 0), ("b", 2)))
    with pytest.raises(ValueError, match="a|b"):
        shortest_path_routing(under, ov)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(2, 5))
def test_category_partition(seed, m):
    rng = np.random.default_rng(seed)
    sc = random_scenario(rng, m)
    routing = random_routing(rng, sc)
    table = derive_categories(routing)
    members = [k for cat in table.categories.values() for k in cat.links]
    assert len(members) == len(set(members))
    assert set(members) == _used_links(routing)
    # key of each category = overlay links whose path contains each member link
    for F, cat in table.categories.items():
        for k in cat.links:
            assert F == frozenset(e for e, p in routing.paths.items() if k in p)
        assert cat.capacity == min(sc.underlay.links[k].capacity for k in cat.links)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_capacity_region_equivalence(seed):
    rng = np.random.default_rng(seed)
    sc = random_scenario(rng, int(rng.integers(2, 5)))
    routing = random_routing(rng, sc)
    table = derive_categories(routing)
    edges = sorted(routing.paths)
    for _ in range(30):
        f = dict(zip(edges, rng.uniform(0, 2.5, len(edges)) * (rng.random(len(edges)) < 0.6)))
        per_link = all(sum(f[e] for e in edges if k in routing.paths[e]) <= ln.capacity
                       for k, ln in enumerate(sc.underlay.links))
        per_cat = all(sum(f[e] for e in F) <= c for F, c in table.capacities().items())
        assert per_link == per_cat


def test_perturb_view_modes():
    sc = roofnet_like(seed=0)
    table = derive_categories(shortest_path_routing(sc.underlay, sc.overlay))
    exact = perturb_view(table, "exact")
    assert exact.is_safe_for(table) and exact.capacities == table.capacities()
    scaled = perturb_view(table, "scale_capacity", factor=0.9)
    assert scaled.is_safe_for(table)
    assert all(np.isclose(scaled.capacities[F], 0.9 * c) for F, c in table.capacities().items())
    over = perturb_view(table, "scale_capacity", factor=1.1)
    assert not over.is_safe_for(table)
    dropped = perturb_view(table, "drop_categories", p_drop=0.5, seed=1)
    assert set(dropped.capacities) < set(table.capacities())
    assert not dropped.is_safe_for(table)
    again = perturb_view(table, "drop_categories", p_drop=0.5, seed=1)
    assert again.capacities == dropped.capacities
    with pytest.raises(ValueError):
        perturb_view(table, "bogus")


def test_scenario_roundtrip(tmp_path):
    sc = iab_like(seed=2)
    path = tmp_path / "s.json"
    path.write_text(json.dumps(scenario_to_dict(sc)))
    back = load_scenario(path)
    assert scenario_to_dict(back)["links"] == scenario_to_dict(sc)["links"]
    assert back.overlay == sc.overlay


def test_generator_reference_in_file():
    sc = scenario_from_dict({"generator": "roofnet-like", "seed": 0})
    assert scenario_to_dict(sc) == scenario_to_dict(roofnet_like(seed=0))


def test_explicit_pair_list():
    data = {"nodes": [0, 1, 2], "links": [{"src": 0, "dst": 1, "capacity_bps": 5, "delay_s": 0},
                                          {"src": 1, "dst": 0, "capacity_bps": 5},
                                          {"src": 1, "dst": 2, "capacity_bps": 5},
                                          {"src": 2, "dst": 1, "capacity_bps": 5}],
            "agents": [{"id": "x", "node": 0}, {"id": "y", "node": 1}, {"id": "z", "node": 2}],
            "base_topology": [["x", "y"], ["y", "z"]]}
    sc = scenario_from_dict(data)
    assert sc.overlay.undirected == [(0, 1), (1, 2)]


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d.update(agents=[]), "agents"),
    (lambda d: d["links"][1].update(capacity_bps=-1), r"links\[1\]\.capacity_bps"),
    (lambda d: d["links"][0].pop("dst"), r"links\[0\].*dst"),
    (lambda d: d["agents"][0].update(node=99), r"agents\[0\]\.node"),
    (lambda d: d.update(base_topology=[["x", "nobody"]]), "base_topology"),
    (lambda d: d.update(generator="mesh"), "generator"),
])
def test_schema_errors_name_the_field(mutate, message):
    data = {"nodes": [0, 1], "links": [{"src": 0, "dst": 1, "capacity_bps": 5},
                                       {"src": 1, "dst": 0, "capacity_bps": 5}],
            "agents": [{"id": "x", "node": 0}, {"id": "y", "node": 1}]}
    mutate(data)
    with pytest.raises(ScenarioError, match=message):
        scenario_from_dict(data)


def test_json_syntax_error_has_line_and_column(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "nodes": [0, 1,\n}')
    with pytest.raises(ScenarioError, match=r"bad\.json:3:1"):
        load_scenario(path)


def test_routing_deterministic():
    sc = roofnet_like(seed=5)
    r1 = shortest_path_routing(sc.underlay, sc.overlay)
    r2 = shortest_path_routing(sc.underlay, sc.overlay)
    assert r1.paths == r2.paths
    assert derive_categories(r1).capacities() == derive_categories(r2).capacities()
