"""End-to-end design pipeline and report comparison."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .dpsgd import Design, TrainConfig, synthetic_problem, train
from .mixing import (ConvergenceParams, iterations_to_converge, metropolis_hastings_weights,
                     mixing_from_weights, optimize_weights, spectral_rho)
from .schedule import (demands_from_activation, direct_path_schedule, min_time_schedule,
                       simulate_completion, validate_schedule)
from .topology import DesignProblem, baseline_topology, bilevel_search
from .underlay import (Scenario, derive_categories, load_scenario, perturb_view,
                       scenario_from_dict, scenario_to_dict, shortest_path_routing)

DESIGN_ALGORITHMS = ("sca", "exact", "relax_rho", "relax_lambda", "greedy")
BASELINES = ("clique", "ring", "prim")
ALGORITHMS = DESIGN_ALGORITHMS + BASELINES
SAFETY_RTOL = 1e-9


class ConfigError(ValueError):
    """Invalid pipeline configuration."""


@dataclass
class PipelineConfig:
    """Everything one pipeline run needs.

    ``scenario`` is a path to a scenario JSON file or an inline scenario
    object (explicit or ``{"generator": ..., "seed": ...}``).  ``train`` may be
    ``None`` to skip training.  Relative scenario paths are resolved against
    ``base_dir``.
    """

    scenario: Union[str, Mapping[str, Any]]
    algorithms: List[str]
    tomography: Dict[str, Any] = field(default_factory=lambda: {"mode": "exact"})
    overlay_routing: bool = True
    weights: str = "optimal"
    model_size_bits: float = 1e6
    convergence: Dict[str, Any] = field(default_factory=dict)
    design: Dict[str, Any] = field(default_factory=dict)
    schedule: Dict[str, Any] = field(default_factory=dict)
    problem: Dict[str, Any] = field(default_factory=lambda: {"kind": "logreg_gauss"})
    train: Optional[Dict[str, Any]] = field(default_factory=dict)
    seed: int = 0
    base_dir: Optional[str] = None

    def __post_init__(self):
        if not self.algorithms:
            raise ConfigError("algorithms: at least one algorithm is required")
        unknown = [a for a in self.algorithms if a not in ALGORITHMS]
        if unknown:
            raise ConfigError(f"algorithms: unknown {unknown}; expected a subset of {list(ALGORITHMS)}")
        if len(set(self.algorithms)) != len(self.algorithms):
            raise ConfigError("algorithms: duplicates are not allowed")
        if self.weights not in ("optimal", "metropolis"):
            raise ConfigError(f"weights: expected 'optimal' or 'metropolis', got {self.weights!r}")
        if not self.model_size_bits > 0:
            raise ConfigError("model_size_bits: must be positive")
        if isinstance(self.scenario, str):
            path = self.scenario_path
            if not path.exists():
                raise ConfigError(f"scenario: file {path} does not exist")
        elif not isinstance(self.scenario, Mapping):
            raise ConfigError("scenario: expected a file path or an object")

    @property
    def scenario_path(self) -> Path:
        p = Path(self.scenario)
        if not p.is_absolute() and self.base_dir:
            p = Path(self.base_dir) / p
        return p

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: Optional[str] = None) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        extra = sorted(set(data) - known)
        if extra:
            raise ConfigError(f"unknown config fields: {extra}")
        if "scenario" not in data or "algorithms" not in data:
            raise ConfigError("config needs 'scenario' and 'algorithms'")
        kwargs = dict(data)
        kwargs.setdefault("base_dir", base_dir)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PipelineConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        return cls.from_dict(data, base_dir=str(path.parent))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d


def scenario_fingerprint(scenario: Scenario) -> str:
    data = scenario_to_dict(scenario)
    data.pop("name", None)
    blob = json.dumps(data, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _load(config: PipelineConfig) -> Scenario:
    if isinstance(config.scenario, str):
        return load_scenario(config.scenario_path)
    return scenario_from_dict(config.scenario, name=str(config.scenario.get("generator", "scenario")))


def _finite(x) -> Optional[float]:
    x = float(x)
    return x if math.isfinite(x) else None


def _design_links(name, problem, overlay, routing, params, design_cfg):
    if name in BASELINES:
        return baseline_topology(name, overlay, routing), None
    res = bilevel_search(problem, params, inner=name,
                         beta_grid=design_cfg.get("beta_grid"),
                         n_points=int(design_cfg.get("beta_points", 32)),
                         inner_kwargs={"eps": float(design_cfg.get("eps", 0.5))} if name == "sca" else None)
    return res.links, res


def run_algorithm(name: str, ctx: dict) -> dict:
    """Design, schedule and (optionally) train one algorithm; returns its report entry."""
    cfg: PipelineConfig = ctx["config"]
    problem: DesignProblem = ctx["design_problem"]
    scenario: Scenario = ctx["scenario"]
    ids = scenario.overlay.agent_ids
    m = scenario.overlay.m
    links, res = _design_links(name, problem, scenario.overlay, ctx["routing"], ctx["params"], cfg.design)
    y = problem.to_y(links)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if cfg.weights == "optimal":
            weights, rho_star = optimize_weights(links, m)
        else:
            weights = metropolis_hastings_weights(links, m)
            rho_star = spectral_rho(mixing_from_weights(weights, m)) if m > 1 else 0.0
    tau_bar = problem.tau_bar(y)
    rho_bar = problem.rho_bar(y)
    k_bar = problem.k_bar(y, ctx["params"])
    k_est = iterations_to_converge(max(rho_star, 0.0), ctx["params"])
    flows = demands_from_activation(links, cfg.model_size_bits, m)
    delays = ctx["routing"].delays
    direct = direct_path_schedule(flows, ctx["view"], delays)
    chosen = direct
    routed = None
    if cfg.overlay_routing:
        sched_cfg = cfg.schedule
        routed = min_time_schedule(flows, scenario.overlay.directed, ctx["view"], delays,
                                   mode=sched_cfg.get("mode", "auto"), seed=cfg.seed,
                                   n_samples=int(sched_cfg.get("n_samples", 16)))
        if routed.tau <= direct.tau:
            chosen = routed
    violations = validate_schedule(chosen, ctx["view"], delays)
    simulated = simulate_completion(chosen, ctx["table"], delays) if flows else 0.0
    safe = simulated <= chosen.tau * (1 + SAFETY_RTOL) + 1e-15
    entry = {
        "status": "ok",
        "n_links": len(links),
        "links": [[ids[i], ids[j]] for i, j in links],
        "beta": _finite(res.beta) if res is not None else _finite(tau_bar),
        "tau_bar_s": _finite(tau_bar),
        "rho_bar": rho_bar,
        "k_bar": _finite(k_bar),
        "rho_star": rho_star,
        "k_estimate": _finite(k_est),
        "tau_direct_s": direct.tau,
        "tau_routed_s": routed.tau if routed is not None else None,
        "tau_s": chosen.tau,
        "schedule_method": chosen.method,
        "schedule_violations": len(violations),
        "simulated_tau_s": simulated,
        "safety_ok": bool(safe),
    }
    out: Optional[Path] = ctx["out"]
    design_doc = {
        "algorithm": name,
        "active_links": entry["links"],
        "weights": [[ids[i], ids[j], weights[(i, j)]] for i, j in sorted(weights)],
        "beta_star_s": entry["beta"],
        "tau_bar_s": entry["tau_bar_s"],
        "k_bar": entry["k_bar"],
        "rho_bar": rho_bar,
        "rho_star": rho_star,
    }
    if out is not None:
        (out / f"design_{name}.json").write_text(json.dumps(design_doc, indent=2))
        (out / f"schedule_{name}.json").write_text(json.dumps(chosen.to_dict(ids), indent=2))
        entry["design_file"] = f"design_{name}.json"
        entry["schedule_file"] = f"schedule_{name}.json"
    if ctx["learning_problem"] is not None:
        if m > 1 and not links:
            raise RuntimeError("no links activated; the agents cannot mix")
        tcfg = TrainConfig(**cfg.train) if cfg.train else TrainConfig(seed=cfg.seed)
        trace = train(ctx["learning_problem"], Design(tuple(links), weights, chosen.tau, m), tcfg)
        it = trace.target_iteration
        entry.update({
            "iterations": len(trace),
            "iterations_to_target": it,
            "diverged": trace.diverged,
            "final_loss": float(trace.loss[-1]) if len(trace) else None,
            "final_accuracy": _finite(trace.accuracy[-1]) if len(trace) else None,
            "time_to_target_s": _finite(trace.time_to_target),
            "time_to_target_direct_s": it * direct.tau if it is not None else None,
            "time_to_target_routed_s": it * chosen.tau if (it is not None and routed is not None) else None,
        })
        if out is not None:
            trace.to_csv(out / f"trace_{name}.csv")
            entry["trace_file"] = f"trace_{name}.csv"
    return entry


def run_pipeline(config: Union[PipelineConfig, Mapping[str, Any]],
                 out_dir: Optional[Union[str, Path]] = None) -> dict:
    """Run every requested algorithm; a failure is recorded per algorithm.

    Writes ``report.json``, ``comparison.csv`` and per-algorithm design,
    schedule and trace files into ``out_dir`` when given.
    """
    if not isinstance(config, PipelineConfig):
        config = PipelineConfig.from_dict(config)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    scenario = _load(config)
    routing = shortest_path_routing(scenario.underlay, scenario.overlay)
    table = derive_categories(routing)
    tomo = dict(config.tomography or {"mode": "exact"})
    mode = tomo.pop("mode", "exact")
    rng = np.random.default_rng(config.seed)
    view = perturb_view(table, mode, seed=int(rng.integers(2 ** 31)), **tomo)
    params = ConvergenceParams(**{"n_agents": scenario.overlay.m, **config.convergence})
    alpha0 = config.design.get("alpha0")
    design_problem = DesignProblem.from_overlay(scenario.overlay, routing, view,
                                                config.model_size_bits, alpha0=alpha0)
    learning = None
    if config.train is not None:
        pcfg = {"kind": "logreg_gauss", **(config.problem or {})}
        pcfg.setdefault("seed", int(rng.integers(2 ** 31)))
        learning = synthetic_problem(m=scenario.overlay.m, **pcfg)
    ctx = dict(config=config, scenario=scenario, routing=routing, table=table, view=view,
               params=params, design_problem=design_problem, learning_problem=learning, out=out)
    results = {}
    for name in config.algorithms:
        try:
            results[name] = run_algorithm(name, ctx)
        except Exception as exc:  # isolate failures per algorithm
            results[name] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    report = {
        "scenario": {"name": scenario.name, "fingerprint": scenario_fingerprint(scenario),
                     "n_agents": scenario.overlay.m, "n_underlay_links": len(scenario.underlay.links)},
        "view": {"mode": mode, "n_categories": len(view.capacities),
                 "n_true_categories": len(table), "safe": view.is_safe_for(table)},
        "config": config.to_dict(),
        "algorithms": results,
    }
    if out is not None:
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        (out / "comparison.csv").write_text(comparison_csv(compare_report([report])))
    return report


def all_completed(report: Mapping) -> bool:
    return all(e.get("status") == "ok" for e in report["algorithms"].values())


COMPARISON_COLUMNS = ("rank", "report", "algorithm", "status", "n_links", "rho_star",
                      "tau_direct_s", "tau_routed_s", "iterations_to_target",
                      "time_to_target_direct_s", "time_to_target_routed_s")


def compare_report(reports: Sequence[Mapping], labels: Optional[Sequence[str]] = None) -> List[dict]:
    """Rank algorithms across reports by simulated time-to-target.

    Rows are sorted by the routed time when present, else the direct time;
    missing times and failures sort last.  Reports must share a scenario.
    """
    if not reports:
        raise ValueError("need at least one report")
    prints = {r["scenario"]["fingerprint"] for r in reports}
    if len(prints) > 1:
        raise ValueError(f"reports describe different scenarios (fingerprints {sorted(prints)})")
    labels = list(labels) if labels is not None else [str(k) for k in range(len(reports))]
    rows = []
    for label, rep in zip(labels, reports):
        for name, e in rep["algorithms"].items():
            rows.append({
                "report": label, "algorithm": name, "status": e.get("status"),
                "n_links": e.get("n_links"), "rho_star": e.get("rho_star"),
                "tau_direct_s": e.get("tau_direct_s"), "tau_routed_s": e.get("tau_routed_s"),
                "iterations_to_target": e.get("iterations_to_target"),
                "time_to_target_direct_s": e.get("time_to_target_direct_s"),
                "time_to_target_routed_s": e.get("time_to_target_routed_s"),
            })

    def key(row):
        t = row["time_to_target_routed_s"]
        if t is None:
            t = row["time_to_target_direct_s"]
        return (row["status"] != "ok", t is None, t if t is not None else 0.0, row["algorithm"], row["report"])

    rows.sort(key=key)
    for k, row in enumerate(rows, 1):
        row["rank"] = k
    return rows


def comparison_csv(rows: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COMPARISON_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({c: ("" if row.get(c) is None else row.get(c)) for c in COMPARISON_COLUMNS})
    return buf.getvalue()
