"""Exact Wasserstein distances between discrete measures.

Equal-weight, equal-size pairs reduce to an assignment problem; general
weights go through the transport LP.  Both routes return the exact
optimum, which the identity-coupling upper bound can never undercut.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.sparse import coo_matrix

MAX_COST_ENTRIES = 1_000_000
_WEIGHT_TOL = 1e-9


@dataclass
class DiscreteMeasure:
    """Weighted point set: points (K, M), weights (K,) summing to one."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if self.weights.size != self.points.shape[0]:
            raise ValueError("one weight per point required")
        if np.any(self.weights < -_WEIGHT_TOL):
            raise ValueError("weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > _WEIGHT_TOL:
            raise ValueError(f"weights sum to {self.weights.sum():.12f}, not 1")

    @property
    def size(self) -> int:
        return self.points.shape[0]


def _ground_cost(a: np.ndarray, b: np.ndarray, p: float, s: float) -> np.ndarray:
    """Pairwise |a_i - b_j|_s^p, (K1, K2)."""
    diff = a[:, None, :] - b[None, :, :]
    if np.isinf(s):
        d = np.abs(diff).max(axis=-1)
    else:
        d = np.sum(np.abs(diff) ** s, axis=-1) ** (1.0 / s)
    return d ** p


def wasserstein_discrete(mu: DiscreteMeasure, nu: DiscreteMeasure,
                         p: float = 1.0, s: float = 2.0) -> float:
    """W_{p,s} distance between two discrete measures by exact transport.

    Parameters
    ----------
    p : float
        Transport exponent, p >= 1.
    s : float
        Ground-norm order, 1 <= s <= inf.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    if not (s >= 1):
        raise ValueError("s must be >= 1")
    if mu.points.shape[1] != nu.points.shape[1]:
        raise ValueError("measures live in different dimensions")
    k1, k2 = mu.size, nu.size
    if k1 * k2 > MAX_COST_ENTRIES:
        raise ValueError(f"cost matrix {k1}x{k2} exceeds the "
                         f"{MAX_COST_ENTRIES} entry guard")
    cost = _ground_cost(mu.points, nu.points, p, s)

    equal_weight = (k1 == k2
                    and np.allclose(mu.weights, 1.0 / k1, atol=_WEIGHT_TOL)
                    and np.allclose(nu.weights, 1.0 / k2, atol=_WEIGHT_TOL))
    if equal_weight:
        rows, cols = linear_sum_assignment(cost)
        total = cost[rows, cols].sum() / k1
        return float(total ** (1.0 / p))

    # transport LP: marginals as sparse equality constraints; one row is
    # redundant and dropped for numerical rank
    n = k1 * k2
    row_idx = np.repeat(np.arange(k1), k2)
    col_idx = np.tile(np.arange(k2), k1)
    rows = np.concatenate([row_idx, k1 + col_idx])
    cols = np.concatenate([np.arange(n), np.arange(n)])
    data = np.ones(2 * n)
    A = coo_matrix((data, (rows, cols)), shape=(k1 + k2, n)).tocsr()[:-1]
    b = np.concatenate([mu.weights, nu.weights])[:-1]
    res = linprog(cost.ravel(), A_eq=A, b_eq=b, bounds=(0, None),
                  method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(max(res.fun, 0.0) ** (1.0 / p))


def wasserstein_upper_bound(a: np.ndarray, b: np.ndarray,
                            p: float = 1.0, s: float = 2.0) -> float:
    """Identity-coupling bound ((1/J) sum |a_j - b_j|_s^p)^(1/p) for two
    paired particle blocks of equal shape."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise ValueError(f"paired blocks must match: {a.shape} vs {b.shape}")
    if np.isinf(s):
        d = np.abs(a - b).max(axis=1)
    else:
        d = np.sum(np.abs(a - b) ** s, axis=1) ** (1.0 / s)
    return float(np.mean(d ** p) ** (1.0 / p))


def _particle_block(u) -> np.ndarray:
    particles = getattr(u, "particles", u)
    return np.atleast_2d(np.asarray(particles, dtype=float))


def homogenization_error(u, forward_fine, forward_coarse) -> float:
    """Mean observation gap (1/J) sum |G_fine(u_j) - G_coarse(u_j)|_2
    between two forward maps over one particle block."""
    U = _particle_block(u)
    gaps = [np.linalg.norm(np.asarray(forward_fine(uj)) - np.asarray(forward_coarse(uj)))
            for uj in U]
    return float(np.mean(gaps))


def discretization_error(u, forward_exact, forward_discrete) -> float:
    """Same functional as homogenization_error for a solver-resolution pair."""
    return homogenization_error(u, forward_exact, forward_discrete)
