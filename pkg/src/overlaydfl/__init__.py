"""Overlay design for decentralized federated learning over a bandwidth-limited underlay.

Modules
-------
underlay   routing, shared-bottleneck categories, inferred views, scenarios
mixing     mixing matrices, optimal and Metropolis weights, iteration surrogate
schedule   multicast demands, min-time and direct schedules, fluid simulation
topology   link activation: exact, SCA, relaxations, greedy, bilevel search, baselines
dpsgd      D-PSGD step, trainer and synthetic learning problems
pipeline   end-to-end runs, reports and comparisons (the ``overlaydfl`` CLI)
"""
from .dpsgd import (Design, LearningProblem, LogisticProblem, QuadraticProblem, TrainConfig, TrainTrace,
                    dpsgd_step, synthetic_problem, train)
from .estimators import DecentralizedSGDClassifier, OverlayDesigner
from .mixing import (ConvergenceParams, NoMixingWarning, build_mixing, check_mixing, incidence_matrix,
                     iterations_to_converge, metropolis_hastings_weights, mixing_from_weights,
                     optimize_weights, spectral_rho)
from .pipeline import PipelineConfig, compare_report, run_pipeline
from .schedule import (Flow, InfeasibleDemandError, Schedule, demands_from_activation,
                       direct_path_schedule, equal_share_time, min_time_schedule, simulate_completion,
                       validate_schedule)
from .topology import (BilevelResult, DesignProblem, baseline_topology, bilevel_search, exact_activation,
                       feasible_under_beta, greedy_fiedler_activation, k_bar, relaxation_lambda_activation,
                       relaxation_rho_activation, rho_bar, sca_activation, tau_bar)
from .underlay import (CategoryTable, InferredView, OverlaySpec, RoutingTable, Scenario, ScenarioError,
                       UnderlayGraph, derive_categories, iab_like, load_scenario, perturb_view, roofnet_like,
                       save_scenario, shortest_path_routing)

__version__ = "0.1.0"
