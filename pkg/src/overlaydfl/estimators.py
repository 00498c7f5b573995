"""scikit-learn style wrappers around the design pipeline and the trainer."""
from __future__ import annotations

import warnings
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dpsgd import LogisticProblem, TrainConfig, train
from .mixing import (ConvergenceParams, check_mixing, metropolis_hastings_weights, mixing_from_weights,
                     optimize_weights, spectral_rho)
from .schedule import demands_from_activation, direct_path_schedule, min_time_schedule
from .topology import DesignProblem, baseline_topology, bilevel_search
from .underlay import InferredView, Scenario, derive_categories, shortest_path_routing


class OverlayDesigner(BaseEstimator):
    """Choose activated links, weights and a schedule for a scenario.

    ``fit(scenario, view=None)`` uses the exact categories when ``view`` is
    omitted.  Fitted attributes end in an underscore.
    """

    def __init__(self, algorithm: str = "sca", model_size_bits: float = 1e6, weights: str = "optimal",
                 overlay_routing: bool = True, alpha0: Optional[float] = None, beta_points: int = 32,
                 convergence: Optional[dict] = None, sca_eps: float = 0.5, random_state: int = 0):
        self.algorithm = algorithm
        self.model_size_bits = model_size_bits
        self.weights = weights
        self.overlay_routing = overlay_routing
        self.alpha0 = alpha0
        self.beta_points = beta_points
        self.convergence = convergence
        self.sca_eps = sca_eps
        self.random_state = random_state

    def fit(self, scenario: Scenario, view: Optional[InferredView] = None):
        routing = shortest_path_routing(scenario.underlay, scenario.overlay)
        if view is None:
            view = InferredView.from_table(derive_categories(routing))
        m = scenario.overlay.m
        params = ConvergenceParams(**{"n_agents": m, **(self.convergence or {})})
        problem = DesignProblem.from_overlay(scenario.overlay, routing, view, self.model_size_bits,
                                             alpha0=self.alpha0)
        if self.algorithm in ("clique", "ring", "prim"):
            links = baseline_topology(self.algorithm, scenario.overlay, routing)
        else:
            kwargs = {"eps": self.sca_eps} if self.algorithm == "sca" else None
            links = bilevel_search(problem, params, self.algorithm, n_points=self.beta_points,
                                   inner_kwargs=kwargs).links
        y = problem.to_y(links)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            if self.weights == "optimal":
                w, rho = optimize_weights(links, m)
            elif self.weights == "metropolis":
                w = metropolis_hastings_weights(links, m)
                rho = spectral_rho(mixing_from_weights(w, m))
            else:
                raise ValueError(f"weights must be 'optimal' or 'metropolis', got {self.weights!r}")
        flows = demands_from_activation(links, self.model_size_bits, m)
        sched = direct_path_schedule(flows, view, routing.delays)
        if self.overlay_routing:
            routed = min_time_schedule(flows, scenario.overlay.directed, view, routing.delays,
                                       seed=self.random_state)
            if routed.tau <= sched.tau:
                sched = routed
        self.activation_ = links
        self.weights_ = w
        self.mixing_matrix_ = mixing_from_weights(w, m)
        self.rho_ = rho
        self.tau_bar_ = problem.tau_bar(y)
        self.beta_ = self.tau_bar_
        self.k_bar_ = problem.k_bar(y, params)
        self.schedule_ = sched
        self.tau_ = sched.tau
        return self


class DecentralizedSGDClassifier(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression trained by D-PSGD with mixing matrix ``W``.

    Training data are shuffled with ``random_state`` and split evenly across
    ``W.shape[0]`` agents (trailing samples that do not divide evenly are
    dropped).  Predictions use the agent-averaged model.
    """

    def __init__(self, mixing_matrix=None, lr: float = 0.5, batch_size: int = 32, max_iter: int = 500,
                 tau: float = 1.0, target_grad: Optional[float] = None, random_state: int = 0):
        self.mixing_matrix = mixing_matrix
        self.lr = lr
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.tau = tau
        self.target_grad = target_grad
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        W = np.eye(1) if self.mixing_matrix is None else check_mixing(self.mixing_matrix)
        m = W.shape[0]
        self.classes_ = unique_labels(y)
        codes = np.searchsorted(self.classes_, y)
        per = len(y) // m
        if per < 1:
            raise ValueError(f"need at least {m} samples for {m} agents")
        order = np.random.default_rng(self.random_state).permutation(len(y))[: per * m]
        parts = [(X[order[k * per:(k + 1) * per]], codes[order[k * per:(k + 1) * per]]) for k in range(m)]
        problem = LogisticProblem(parts, len(self.classes_))
        cfg = TrainConfig(lr=self.lr, batch_size=self.batch_size, seed=self.random_state,
                          max_iter=self.max_iter, target_grad=self.target_grad)
        self.problem_ = problem
        self.trace_ = train(problem, (W, self.tau), cfg)
        self.params_ = self.trace_.final_params
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X)
        return self.problem_.predict_proba(self.params_, X)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
