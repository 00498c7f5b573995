import csv
import io
import json

import numpy as np
import pytest

from instances import random_scenario
from overlaydfl.cli import main
from overlaydfl.pipeline import (ConfigError, PipelineConfig, all_completed, compare_report, run_pipeline,
                                 scenario_fingerprint)
from overlaydfl.underlay import (derive_categories, roofnet_like, scenario_from_dict, scenario_to_dict,
                                 shortest_path_routing)

SMALL_TRAIN = {"lr": 0.5, "batch_size": 16, "max_iter": 60, "target_grad": None, "target_loss": 0.8, "seed": 0}
SMALL_PROBLEM = {"kind": "logreg_gauss", "d": 8, "samples": 200, "n_classes": 3, "seed": 0}


def _small_scenario(seed=0, m=4):
    return scenario_to_dict(random_scenario(np.random.default_rng(seed), m))


def _config(**kw):
    base = {"scenario": _small_scenario(), "algorithms": ["clique", "ring", "sca"],
            "design": {"beta_points": 8}, "problem": SMALL_PROBLEM, "train": SMALL_TRAIN}
    base.update(kw)
    return base


def test_clique_without_routing_uses_direct_schedule():
    data = _small_scenario(1, 5)
    rep = run_pipeline(_config(scenario=data, algorithms=["clique"], overlay_routing=False, train=None))
    e = rep["algorithms"]["clique"]
    assert e["status"] == "ok"
    assert e["tau_routed_s"] is None
    assert e["tau_s"] == e["tau_direct_s"]
    # oracle: every directed link on its own path, fair share per category
    sc = scenario_from_dict(data)
    caps = derive_categories(shortest_path_routing(sc.underlay, sc.overlay)).capacities()
    assert e["tau_s"] == pytest.approx(1e6 * max(len(F) / c for F, c in caps.items()), rel=1e-12)
    assert e["tau_bar_s"] == pytest.approx(e["tau_s"], rel=1e-12)


def test_artifacts_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_pipeline(_config(), a)
    run_pipeline(_config(), b)
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    for name in ("clique", "ring", "sca"):
        for stem in ("design", "schedule"):
            assert (a / f"{stem}_{name}.json").exists()
        header = (a / f"trace_{name}.csv").read_text().splitlines()[0]
        assert header == "iteration,wall_clock_s,loss,accuracy,grad_norm_sq_avg"
    design = json.loads((a / "design_sca.json").read_text())
    assert {"active_links", "weights", "beta_star_s", "tau_bar_s", "k_bar"} <= set(design)
    rows = list(csv.DictReader(io.StringIO((a / "comparison.csv").read_text())))
    assert [r["algorithm"] for r in rows] and sorted(int(r["rank"]) for r in rows) == [1, 2, 3]


def test_routed_never_slower_than_direct():
    rep = run_pipeline(_config(scenario=_small_scenario(2, 5)))
    for name, e in rep["algorithms"].items():
        assert e["tau_s"] <= e["tau_direct_s"]
        assert e["schedule_violations"] == 0 and e["safety_ok"]
        if e["time_to_target_routed_s"] is not None:
            assert e["time_to_target_routed_s"] <= e["time_to_target_direct_s"]


def test_failure_is_isolated(tmp_path):
    data = _small_scenario(3, 4)
    ids = [a["id"] for a in data["agents"]]
    data["base_topology"] = [[ids[k], ids[k + 1]] for k in range(3)]  # a path: no ring possible
    rep = run_pipeline(_config(scenario=data, algorithms=["ring", "prim"], train=None), tmp_path)
    assert rep["algorithms"]["ring"]["status"] == "failed"
    assert "ring needs links" in rep["algorithms"]["ring"]["error"]
    assert rep["algorithms"]["prim"]["status"] == "ok"
    assert not all_completed(rep)


def test_compare_rejects_different_scenarios():
    r1 = run_pipeline(_config(algorithms=["clique"], train=None))
    r2 = run_pipeline(_config(scenario=_small_scenario(9), algorithms=["clique"], train=None))
    with pytest.raises(ValueError, match="different scenarios"):
        compare_report([r1, r2])
    assert len(compare_report([r1, r1], ["x", "y"])) == 2


def test_fingerprint_ignores_name():
    sc = roofnet_like(seed=0)
    d = scenario_to_dict(sc)
    d["name"] = "renamed"
    assert scenario_fingerprint(scenario_from_dict(d)) == scenario_fingerprint(sc)


@pytest.mark.parametrize("bad, field", [
    ({"algorithms": []}, "algorithms"),
    ({"algorithms": ["tsp"]}, "unknown"),
    ({"weights": "uniform"}, "weights"),
    ({"model_size_bits": 0}, "model_size_bits"),
    ({"colour": "blue"}, "unknown config fields"),
    ({"scenario": "missing.json"}, "does not exist"),
])
def test_config_errors(bad, field):
    with pytest.raises(ConfigError, match=field):
        PipelineConfig.from_dict(_config(**bad))


def test_cli_end_to_end(tmp_path, capsys):
    scen = tmp_path / "scen.json"
    assert main(["gen-scenario", "--generator", "iab-like", "--seed", "1", "--out", str(scen)]) == 0
    cfg = {"scenario": "scen.json", "algorithms": ["ring", "prim"], "problem": SMALL_PROBLEM,
           "train": SMALL_TRAIN}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    out = tmp_path / "out"
    assert main(["run", "--config", str(tmp_path / "cfg.json"), "--out", str(out), "--seed", "3"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["seed"] == 3
    assert main(["compare", str(out / "report.json"), str(out / "report.json"),
                 "--out", str(tmp_path / "cmp.csv")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "cmp.csv")))
    assert len(rows) == 4


def test_cli_exit_codes(tmp_path, capsys):
    (tmp_path / "bad.json").write_text('{"scenario": 1,\n "algorithms": ["ring"],}')
    assert main(["run", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == 2
    assert "bad.json:2" in capsys.readouterr().err
    data = _small_scenario(3, 4)
    ids = [a["id"] for a in data["agents"]]
    data["base_topology"] = [[ids[k], ids[k + 1]] for k in range(3)]
    (tmp_path / "path.json").write_text(json.dumps({"scenario": data, "algorithms": ["ring"], "train": None}))
    assert main(["run", "--config", str(tmp_path / "path.json"), "--out", str(tmp_path / "o")]) == 1
    with pytest.raises(SystemExit):
        main(["gen-scenario", "--generator", "grid"])
