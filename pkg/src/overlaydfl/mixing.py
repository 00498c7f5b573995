"""Mixing matrices, weight design and the iteration-count surrogate."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import cvxpy as cp
import numpy as np

Edge = Tuple[int, int]


class NoMixingWarning(UserWarning):
    """The activated graph is disconnected, so no weights can mix."""


def _norm_links(links: Iterable[Edge]) -> list:
    return sorted({(min(i, j), max(i, j)) for i, j in links})


def averaging_matrix(m: int) -> np.ndarray:
    return np.full((m, m), 1.0 / m)


def incidence_matrix(m: int, links: Sequence[Edge]) -> np.ndarray:
    """``m x len(links)`` incidence matrix, each link oriented ``i -> j``."""
    B = np.zeros((m, len(links)))
    for col, (i, j) in enumerate(links):
        B[i, col] = 1.0
        B[j, col] = -1.0
    return B


def build_mixing(alpha, B: np.ndarray) -> np.ndarray:
    """Return ``W = I - B diag(alpha) B^T``."""
    alpha = np.asarray(alpha, dtype=float)
    if B.shape[1] != alpha.shape[0]:
        raise ValueError(f"alpha has {alpha.shape[0]} entries but B has {B.shape[1]} columns")
    return np.eye(B.shape[0]) - (B * alpha) @ B.T


def mixing_from_weights(weights: Mapping[Edge, float], m: int) -> np.ndarray:
    links = sorted(weights)
    return build_mixing([weights[e] for e in links], incidence_matrix(m, links))


def laplacian(weights: Mapping[Edge, float], m: int) -> np.ndarray:
    return np.eye(m) - mixing_from_weights(weights, m)


def check_mixing(W, links: Optional[Iterable[Edge]] = None, atol: float = 1e-10) -> np.ndarray:
    """Validate symmetry, unit row sums and (optionally) the sparsity pattern."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError(f"mixing matrix must be square, got shape {W.shape}")
    if not np.allclose(W, W.T, atol=atol, rtol=0):
        raise ValueError("mixing matrix is not symmetric")
    if not np.allclose(W.sum(axis=1), 1.0, atol=atol, rtol=0):
        raise ValueError("mixing matrix rows do not sum to one")
    if links is not None:
        allowed = np.eye(len(W), dtype=bool)
        for i, j in links:
            allowed[i, j] = allowed[j, i] = True
        if np.any(np.abs(W[~allowed]) > atol):
            raise ValueError("mixing matrix has weight on a link outside the allowed set")
    return W


def spectral_rho(W) -> float:
    """``||W - J||`` for symmetric ``W``; the spectral gap is ``1 - rho``."""
    W = np.asarray(W, dtype=float)
    m = W.shape[0]
    ev = np.linalg.eigvalsh(W - averaging_matrix(m))
    return float(np.max(np.abs(ev)))


def is_connected(links: Iterable[Edge], m: int) -> bool:
    parent = list(range(m))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    comps = m
    for i, j in links:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            comps -= 1
    return comps <= 1


def optimize_weights(active: Iterable[Edge], m: int, tol: float = 1e-6,
                     solver: str = "CLARABEL") -> Tuple[Dict[Edge, float], float]:
    """Edge weights minimising ``||I - B diag(alpha) B^T - J||`` on ``active``.

    Solved as a semidefinite program.  The returned ``rho`` is recomputed from
    the eigenvalues of the resulting mixing matrix; if it exceeds the solver's
    optimal value by more than ``tol`` a :class:`RuntimeWarning` is raised.
    Disconnected activation sets give ``rho >= 1`` and a
    :class:`NoMixingWarning`.
    """
    links = _norm_links(active)
    if m == 1:
        return {}, 0.0
    if not links:
        warnings.warn("no activated links: the mixing matrix is the identity", NoMixingWarning)
        return {}, 1.0
    connected = is_connected(links, m)
    if not connected:
        warnings.warn("activated graph is disconnected; rho* >= 1", NoMixingWarning)
    B = incidence_matrix(m, links)
    alpha = cp.Variable(len(links))
    rho = cp.Variable()
    M = np.eye(m) - averaging_matrix(m) - B @ cp.diag(alpha) @ B.T
    M = (M + M.T) / 2
    prob = cp.Problem(cp.Minimize(rho), [M << rho * np.eye(m), M >> -rho * np.eye(m)])
    prob.solve(solver=solver)
    if alpha.value is None:
        raise RuntimeError(f"weight optimisation failed with status {prob.status}")
    a = np.asarray(alpha.value, dtype=float)
    achieved = spectral_rho(build_mixing(a, B))
    if achieved - float(prob.value) > tol:
        warnings.warn(f"weight optimisation gap {achieved - prob.value:.3g} exceeds tol {tol}",
                      RuntimeWarning)
    return {e: float(v) for e, v in zip(links, a)}, achieved


def metropolis_hastings_weights(active: Iterable[Edge], m: int) -> Dict[Edge, float]:
    links = _norm_links(active)
    deg = np.zeros(m, dtype=int)
    for i, j in links:
        deg[i] += 1
        deg[j] += 1
    return {(i, j): 1.0 / (1 + max(deg[i], deg[j])) for i, j in links}


@dataclass(frozen=True)
class ConvergenceParams:
    """Constants of the D-PSGD iteration bound.

    ``c1``, ``c2`` and ``c3`` stand in for the hidden constants of the
    big-O bound; only orderings of the resulting counts are meaningful.
    """

    n_agents: int = 10
    smoothness: float = 1.0
    sigma: float = 1.0
    zeta: float = 1.0
    M1: float = 1.0
    M2: float = 1.0
    eps0: float = 0.1
    f_gap: float = 1.0
    c1: float = 1.0
    c2: float = 1.0
    c3: float = 1.0

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if not self.eps0 > 0:
            raise ValueError("eps0 must be > 0")
        for name in ("smoothness", "sigma", "zeta", "M1", "M2", "f_gap", "c1", "c2", "c3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def iterations_to_converge(rho: float, params: ConvergenceParams) -> float:
    """Iteration-count surrogate ``K(1 - rho^2, 1)``; ``inf`` once ``rho >= 1``."""
    if rho < 0:
        raise ValueError(f"rho must be nonnegative, got {rho}")
    if rho >= 1:
        return math.inf
    P = params
    p = 1.0 - rho * rho
    e = P.eps0
    bracket = (P.c1 * P.sigma ** 2 / (P.n_agents * e ** 2)
               + P.c2 * (P.zeta * math.sqrt(P.M1 + 1) + P.sigma * math.sqrt(p)) / (p * e ** 1.5)
               + P.c3 * math.sqrt((P.M2 + 1) * (P.M1 + 1)) / (p * e))
    return P.smoothness * P.f_gap * bracket
