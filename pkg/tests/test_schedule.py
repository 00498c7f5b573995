import itertools
import json

import numpy as np
import pytest

from instances import bottleneck_time, brute_arborescences, random_scenario
from overlaydfl.schedule import (Flow, InfeasibleDemandError, demands_from_activation, direct_path_schedule,
                                 enumerate_arborescences, equal_share_time, min_time_schedule,
                                 simulate_completion, tree_paths, validate_schedule)
from overlaydfl.underlay import (InferredView, Link, OverlaySpec, Scenario, UnderlayGraph, derive_categories,
                                 shortest_path_routing)


def _triangle():
    """Agents 0,1,2 on a triangle whose 0->1 link is slow: relaying via 2 halves the time."""
    links = (Link(0, 1, 1.0), Link(1, 0, 2.0), Link(0, 2, 2.0), Link(2, 0, 2.0), Link(1, 2, 2.0), Link(2, 1, 2.0))
    sc = Scenario(UnderlayGraph((0, 1, 2), links), OverlaySpec.clique((("a", 0), ("b", 1), ("c", 2))))
    routing = shortest_path_routing(sc.underlay, sc.overlay)
    return sc, routing, derive_categories(routing)


def test_flow_validation():
    with pytest.raises(ValueError):
        Flow(0, frozenset(), 1.0)
    with pytest.raises(ValueError):
        Flow(0, frozenset({0, 1}), 1.0)
    with pytest.raises(ValueError):
        Flow(0, frozenset({1}), 0.0)


def test_demands_from_activation():
    flows = demands_from_activation([(0, 1), (2, 1)], 5.0, 4)
    assert [(f.source, sorted(f.targets), f.size) for f in flows] == [(0, [1], 5.0), (1, [0, 2], 5.0), (2, [1], 5.0)]


def test_triangle_relay_beats_direct():
    sc, routing, table = _triangle()
    flows = [Flow(0, frozenset({1}), 1.0)]
    direct = direct_path_schedule(flows, table)
    assert direct.tau == pytest.approx(1.0)
    best = min_time_schedule(flows, sc.overlay.directed, table, mode="exact")
    assert best.tau == pytest.approx(0.5)
    assert best.trees[0] == frozenset({(0, 2), (2, 1)})
    assert best.paths[(0, 1)] == ((0, 2), (2, 1))
    assert validate_schedule(best, table) == []
    assert simulate_completion(best, table) == pytest.approx(0.5)


def test_direct_schedule_matches_closed_form():
    rng = np.random.default_rng(3)
    for _ in range(20):
        sc = random_scenario(rng, int(rng.integers(2, 6)))
        table = derive_categories(shortest_path_routing(sc.underlay, sc.overlay))
        active = [e for e in sc.overlay.undirected if rng.random() < 0.6] or [sc.overlay.undirected[0]]
        flows = demands_from_activation(active, 2.0, sc.overlay.m)
        trees = {f.source: frozenset((f.source, k) for k in f.targets) for f in flows}
        sched = direct_path_schedule(flows, table)
        assert sched.tau == pytest.approx(bottleneck_time(trees, table.capacities(), 2.0), rel=1e-12)
        assert validate_schedule(sched, table) == []


def test_enumerate_arborescences_matches_brute_force():
    edges = [(i, j) for i in range(4) for j in range(4) if i != j]
    for targets in ({1}, {1, 2}, {1, 2, 3}):
        ours = set(enumerate_arborescences(0, frozenset(targets), 4, edges))
        # the enumerator drops relay leaves; compare against the brute force restricted likewise
        brute = {t for t in brute_arborescences(0, targets, edges)
                 if all(any(i == v for i, _ in t) for v in {j for _, j in t} - set(targets))}
        assert ours == brute


def test_exact_matches_brute_force_small():
    rng = np.random.default_rng(7)
    for _ in range(15):
        m = int(rng.integers(2, 5))
        sc = random_scenario(rng, m)
        table = derive_categories(shortest_path_routing(sc.underlay, sc.overlay))
        caps = table.capacities()
        active = [e for e in sc.overlay.undirected if rng.random() < 0.7] or [sc.overlay.undirected[0]]
        flows = demands_from_activation(active, 1.0, m)
        edges = sc.overlay.directed
        options = [brute_arborescences(f.source, f.targets, edges) for f in flows]
        best = min(bottleneck_time(dict(zip([f.source for f in flows], combo)), caps, 1.0)
                   for combo in itertools.product(*options))
        sched = min_time_schedule(flows, edges, table, mode="exact")
        assert sched.optimal
        assert sched.tau == pytest.approx(best, rel=1e-12)


def test_heuristic_between_exact_and_direct():
    rng = np.random.default_rng(11)
    for _ in range(10):
        m = int(rng.integers(3, 6))
        sc = random_scenario(rng, m)
        table = derive_categories(shortest_path_routing(sc.underlay, sc.overlay))
        flows = demands_from_activation(sc.overlay.undirected, 1.0, m)
        exact = min_time_schedule(flows, sc.overlay.directed, table, mode="exact")
        heur = min_time_schedule(flows, sc.overlay.directed, table, mode="heuristic", seed=0)
        direct = direct_path_schedule(flows, table)
        assert exact.tau <= heur.tau * (1 + 1e-12)
        assert heur.tau <= direct.tau * (1 + 1e-12)
        assert validate_schedule(heur, table) == []


def test_equal_share_and_simulation_agree_on_triangle():
    sc, routing, table = _triangle()
    flows = demands_from_activation(sc.overlay.undirected, 1.0, 3)
    sched = min_time_schedule(flows, sc.overlay.directed, table, mode="exact")
    assert simulate_completion(sched, table) == pytest.approx(equal_share_time(sched, table), rel=1e-12)


def test_simulation_with_delays_adds_path_delay():
    links = (Link(0, 1, 1.0, 0.25), Link(1, 0, 1.0, 0.25))
    sc = Scenario(UnderlayGraph((0, 1), links), OverlaySpec.clique((("a", 0), ("b", 1))))
    routing = shortest_path_routing(sc.underlay, sc.overlay)
    table = derive_categories(routing)
    flows = demands_from_activation([(0, 1)], 1.0, 2)
    sched = direct_path_schedule(flows, table, routing.delays)
    assert sched.tau == pytest.approx(1.25)
    assert simulate_completion(sched, table, routing.delays) == pytest.approx(1.25)
    assert validate_schedule(sched, table, routing.delays) == []
    with pytest.raises(ValueError, match="delay"):
        equal_share_time(sched, table, delays=routing.delays)


def test_validator_flags_tampering():
    sc, routing, table = _triangle()
    flows = demands_from_activation(sc.overlay.undirected, 1.0, 3)
    sched = direct_path_schedule(flows, table)
    fast = type(sched)(sched.flows, sched.trees, sched.paths, sched.rates, sched.link_rates,
                       sched.tau * 0.5, sched.big_m)
    kinds = {v.constraint for v in validate_schedule(fast, table)}
    assert "time" in kinds
    greedy_rates = {s: r * 3 for s, r in sched.rates.items()}
    greedy_links = {s: {e: r * 3 for e, r in lr.items()} for s, lr in sched.link_rates.items()}
    over = type(sched)(sched.flows, sched.trees, sched.paths, greedy_rates, greedy_links, sched.tau, sched.big_m)
    assert "capacity" in {v.constraint for v in validate_schedule(over, table)}


def test_unreachable_destination():
    sc, routing, table = _triangle()
    flows = [Flow(0, frozenset({1}), 1.0)]
    with pytest.raises(InfeasibleDemandError, match="agent 0"):
        min_time_schedule(flows, [(1, 0), (0, 2)], table)


def test_tree_paths_rejects_non_arborescence():
    assert tree_paths(0, {(0, 1), (1, 2)}) == {1: ((0, 1),), 2: ((0, 1), (1, 2))}
    with pytest.raises(ValueError):
        tree_paths(0, {(0, 1), (2, 1)})


def test_schedule_json_export():
    sc, routing, table = _triangle()
    flows = demands_from_activation(sc.overlay.undirected, 8.0, 3)
    sched = min_time_schedule(flows, sc.overlay.directed, table)
    doc = json.loads(json.dumps(sched.to_dict(sc.overlay.agent_ids)))
    assert doc["tau_s"] == sched.tau
    assert {f["source"] for f in doc["flows"]} == {"a", "b", "c"}


def test_inferred_view_drives_design():
    sc, routing, table = _triangle()
    half = InferredView({F: c / 2 for F, c in table.capacities().items()})
    flows = demands_from_activation(sc.overlay.undirected, 1.0, 3)
    s_true = min_time_schedule(flows, sc.overlay.directed, table, mode="exact")
    s_half = min_time_schedule(flows, sc.overlay.directed, half, mode="exact")
    assert s_half.tau == pytest.approx(2 * s_true.tau)
    assert simulate_completion(s_half, table) <= s_half.tau
