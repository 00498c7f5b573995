"""Desk-scale decentralized SGD over a designed overlay."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax, softmax

from .mixing import check_mixing, mixing_from_weights

Edge = Tuple[int, int]

DIVERGENCE_LOSS = 1e12
TRACE_COLUMNS = ("iteration", "wall_clock_s", "loss", "accuracy", "grad_norm_sq_avg")


def dpsgd_step(X: np.ndarray, W: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    """One D-PSGD iteration: ``x_i' = sum_j W_ij x_j - lr * g_i``.

    ``grads`` must already be evaluated at the pre-mixing parameters ``X``.
    """
    X = np.asarray(X, dtype=float)
    W = np.asarray(W, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if W.shape != (X.shape[0], X.shape[0]) or grads.shape != X.shape:
        raise ValueError(f"inconsistent shapes: X {X.shape}, W {W.shape}, grads {grads.shape}")
    return W @ X - lr * grads


# ---------------------------------------------------------------- problems

class LearningProblem:
    """Per-agent objectives ``F_i``; the global objective is their mean."""

    m: int
    dim: int

    def local_loss(self, i: int, x: np.ndarray) -> float:
        raise NotImplementedError

    def local_grad(self, i: int, x: np.ndarray, batch: Optional[np.ndarray] = None) -> np.ndarray:
        raise NotImplementedError

    def sample_batch(self, i: int, rng: np.random.Generator, size: int) -> Optional[np.ndarray]:
        return None

    def accuracy(self, x: np.ndarray) -> float:
        return math.nan

    def init_params(self) -> np.ndarray:
        return np.zeros(self.dim)

    def global_loss(self, x: np.ndarray) -> float:
        return float(np.mean([self.local_loss(i, x) for i in range(self.m)]))

    def global_grad(self, x: np.ndarray) -> np.ndarray:
        return np.mean([self.local_grad(i, x) for i in range(self.m)], axis=0)


class LogisticProblem(LearningProblem):
    """Multinomial logistic regression with a bias term.

    Parameters are flattened as ``[W (d x C) row-major, b (C)]``.  Each local
    loss is the mean cross-entropy over that agent's samples.
    """

    def __init__(self, datasets: Sequence[Tuple[np.ndarray, np.ndarray]], n_classes: int):
        if not datasets:
            raise ValueError("need at least one agent dataset")
        self.datasets = [(np.asarray(X, dtype=float), np.asarray(y, dtype=int)) for X, y in datasets]
        self.m = len(self.datasets)
        self.n_features = self.datasets[0][0].shape[1]
        self.n_classes = int(n_classes)
        self.dim = (self.n_features + 1) * self.n_classes
        self._Xall = np.vstack([X for X, _ in self.datasets])
        self._yall = np.concatenate([y for _, y in self.datasets])

    @property
    def n_samples(self) -> int:
        return len(self._yall)

    def _unpack(self, x):
        d, C = self.n_features, self.n_classes
        return x[: d * C].reshape(d, C), x[d * C:]

    def _loss_grad(self, X, y, x, need_grad=True):
        Wm, b = self._unpack(x)
        logits = X @ Wm + b
        logp = log_softmax(logits, axis=1)
        n = len(y)
        loss = -float(logp[np.arange(n), y].mean())
        if not need_grad:
            return loss, None
        P = np.exp(logp)
        P[np.arange(n), y] -= 1.0
        P /= n
        return loss, np.concatenate([(X.T @ P).ravel(), P.sum(axis=0)])

    def local_loss(self, i, x):
        X, y = self.datasets[i]
        return self._loss_grad(X, y, x, need_grad=False)[0]

    def local_grad(self, i, x, batch=None):
        X, y = self.datasets[i]
        if batch is not None:
            X, y = X[batch], y[batch]
        return self._loss_grad(X, y, x)[1]

    def sample_batch(self, i, rng, size):
        n = len(self.datasets[i][1])
        if size >= n:
            return None
        return rng.choice(n, size=size, replace=False)

    def global_loss(self, x):
        # equal-size splits make the mean of local means the pooled mean
        return float(np.mean([self.local_loss(i, x) for i in range(self.m)]))

    def accuracy(self, x):
        Wm, b = self._unpack(x)
        pred = np.argmax(self._Xall @ Wm + b, axis=1)
        return float(np.mean(pred == self._yall))

    def predict_proba(self, x, X):
        Wm, b = self._unpack(x)
        return softmax(np.asarray(X, dtype=float) @ Wm + b, axis=1)


class QuadraticProblem(LearningProblem):
    """``F_i(x) = 0.5 x^T A_i x - b_i^T x`` with optional Gaussian gradient noise."""

    def __init__(self, A: Sequence[np.ndarray], b: Sequence[np.ndarray], noise_std: float = 0.0):
        self.A = [np.asarray(a, dtype=float) for a in A]
        self.b = [np.asarray(v, dtype=float) for v in b]
        if len(self.A) != len(self.b) or not self.A:
            raise ValueError("A and b must be nonempty and of equal length")
        self.m = len(self.A)
        self.dim = self.b[0].shape[0]
        self.noise_std = float(noise_std)

    def local_loss(self, i, x):
        return float(0.5 * x @ self.A[i] @ x - self.b[i] @ x)

    def local_grad(self, i, x, batch=None):
        g = self.A[i] @ x - self.b[i]
        if batch is not None:
            g = g + batch
        return g

    def sample_batch(self, i, rng, size):
        if self.noise_std == 0:
            return None
        return rng.normal(0.0, self.noise_std / math.sqrt(size), self.dim)

    def minimizer(self) -> np.ndarray:
        return np.linalg.solve(sum(self.A), sum(self.b))


def _heterogeneous_order(labels: np.ndarray, heterogeneity: float, n_classes: int,
                         rng: np.random.Generator) -> np.ndarray:
    """Sample order before an even contiguous split.

    ``0`` is a plain shuffle; ``1`` sorts by label so that each agent sees as
    few classes as possible; values in between interpolate the sort key.
    """
    noise = rng.random(len(labels)) * n_classes
    key = heterogeneity * labels + (1.0 - heterogeneity) * noise
    return np.argsort(key, kind="stable")


def synthetic_problem(kind: str = "logreg_gauss", m: int = 10, d: int = 200, samples: int = 5000,
                      heterogeneity: float = 0.0, seed: int = 0, n_classes: int = 10,
                      class_sep: float = 1.0, noise_std: float = 0.0) -> LearningProblem:
    """Build a synthetic learning problem split across ``m`` agents.

    ``logreg_gauss``: Gaussian clusters (unit covariance, class means drawn
    with per-coordinate scale ``class_sep / sqrt(d)``), shuffled with the seed
    and split evenly.  ``heterogeneity`` in ``[0, 1]`` skews labels per agent.

    ``quadratic``: SPD ``A_i`` with spectrum in ``[0.5, 2]`` and
    ``b_i = A_i (x* + heterogeneity * u_i)`` for unit random ``u_i``.
    """
    if m < 1 or d < 1 or samples < 1:
        raise ValueError("m, d and samples must be positive")
    if not 0.0 <= heterogeneity <= (1.0 if kind == "logreg_gauss" else math.inf):
        raise ValueError(f"heterogeneity out of range for {kind}: {heterogeneity}")
    rng = np.random.default_rng(seed)
    if kind == "logreg_gauss":
        per = samples // m
        if per < 1:
            raise ValueError("fewer samples than agents")
        n = per * m
        means = rng.normal(0.0, class_sep / math.sqrt(d), (n_classes, d))
        y = rng.integers(0, n_classes, n)
        X = means[y] + rng.normal(0.0, 1.0, (n, d))
        order = _heterogeneous_order(y, heterogeneity, n_classes, rng)
        X, y = X[order], y[order]
        return LogisticProblem([(X[k * per:(k + 1) * per], y[k * per:(k + 1) * per]) for k in range(m)],
                               n_classes)
    if kind == "quadratic":
        xstar = rng.normal(0.0, 1.0, d)
        A, b = [], []
        for _ in range(m):
            Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
            Ai = (Q * rng.uniform(0.5, 2.0, d)) @ Q.T
            Ai = 0.5 * (Ai + Ai.T)
            u = rng.normal(size=d)
            u /= np.linalg.norm(u)
            A.append(Ai)
            b.append(Ai @ (xstar + heterogeneity * u))
        return QuadraticProblem(A, b, noise_std)
    raise ValueError(f"unknown problem kind {kind!r}; expected 'logreg_gauss' or 'quadratic'")


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    batch_size: int = 32
    seed: int = 0
    max_iter: int = 1000
    target_grad: Optional[float] = 0.01
    target_loss: Optional[float] = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class TrainTrace:
    iteration: np.ndarray
    wall_clock_s: np.ndarray
    loss: np.ndarray
    accuracy: np.ndarray
    grad_norm_sq_avg: np.ndarray
    tau: float
    diverged: bool = False
    target_iteration: Optional[int] = None
    final_params: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def reached_target(self) -> bool:
        return self.target_iteration is not None

    @property
    def time_to_target(self) -> float:
        return self.target_iteration * self.tau if self.reached_target else math.inf

    def __len__(self):
        return len(self.iteration)

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for row in zip(self.iteration, self.wall_clock_s, self.loss, self.accuracy, self.grad_norm_sq_avg):
                w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])

    @staticmethod
    def read_csv(path: Union[str, Path]) -> Dict[str, np.ndarray]:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return {c: np.array([float(r[c]) for r in rows]) for c in TRACE_COLUMNS}


@dataclass(frozen=True)
class Design:
    """Activated links, their weights and the per-iteration time."""

    links: Tuple[Edge, ...]
    weights: Mapping[Edge, float]
    tau: float
    m: int

    def mixing_matrix(self) -> np.ndarray:
        return check_mixing(mixing_from_weights(dict(self.weights), self.m), self.links)


def train(problem: LearningProblem, design: Union[Design, Tuple[np.ndarray, float]],
          config: TrainConfig = TrainConfig()) -> TrainTrace:
    """Run D-PSGD until the target metric is met or ``max_iter`` is reached.

    ``design`` is a :class:`Design` or a ``(W, tau)`` pair.  Iteration ``k``
    (from 1) finishes at simulated time ``k * tau``.  Each row records, at the
    agent average, the global loss, accuracy and the running mean of the
    squared global gradient norm.
    """
    if isinstance(design, Design):
        W, tau = design.mixing_matrix(), float(design.tau)
    else:
        W, tau = check_mixing(design[0]), float(design[1])
    if W.shape[0] != problem.m:
        raise ValueError(f"mixing matrix is {W.shape[0]}x{W.shape[0]} but the problem has {problem.m} agents")
    if not tau > 0 or not math.isfinite(tau):
        raise ValueError(f"per-iteration time must be positive and finite, got {tau}")
    rng = np.random.default_rng(config.seed)
    X = np.tile(problem.init_params(), (problem.m, 1))
    it, wall, losses, accs, gavg = [], [], [], [], []
    gsum = 0.0
    xbar_ok = X.mean(axis=0)
    diverged = False
    target_iter = None
    for k in range(1, config.max_iter + 1):
        G = np.stack([problem.local_grad(i, X[i], problem.sample_batch(i, rng, config.batch_size))
                      for i in range(problem.m)])
        X = dpsgd_step(X, W, G, config.lr)
        xbar = X.mean(axis=0)
        loss = problem.global_loss(xbar) if np.all(np.isfinite(xbar)) else math.inf
        if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
            diverged = True
            break
        xbar_ok = xbar
        gn = float(np.sum(problem.global_grad(xbar) ** 2))
        gsum += gn
        it.append(k)
        wall.append(k * tau)
        losses.append(loss)
        accs.append(problem.accuracy(xbar))
        gavg.append(gsum / k)
        hit = ((config.target_grad is not None and gavg[-1] <= config.target_grad)
               or (config.target_loss is not None and loss <= config.target_loss))
        if hit:
            target_iter = k
            break
    arr = lambda v, dt=float: np.asarray(v, dtype=dt)
    return TrainTrace(arr(it, int), arr(wall), arr(losses), arr(accs), arr(gavg), tau, diverged, target_iter,
                      xbar_ok)
