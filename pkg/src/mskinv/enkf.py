"""Iterative ensemble Kalman inversion with perturbed observations.

Empirical covariances use the 1/J normalization.  In bayes mode the data
covariance is inflated by the iteration count so that the N-step linear
Gaussian limit matches the one-shot posterior; point mode keeps the raw
covariance and is the estimator used for the PDE experiments.

All randomness is drawn from named substreams of a single root seed; the
observation perturbations are keyed by (seed, iteration, particle), so
runs are bit-identical regardless of evaluation order.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .errors import ForwardEvalError
from .transport import DiscreteMeasure

log = logging.getLogger(__name__)

SPREAD_WARN_FACTOR = 10.0


def _tag_int(tag) -> int:
    if isinstance(tag, str):
        return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")
    return int(tag)


def substream(seed: int, *tags) -> np.random.Generator:
    """Deterministic generator for a named substream of the root seed."""
    entropy = [int(seed)] + [_tag_int(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


class NoiseModel:
    """Gaussian observation noise with a fixed covariance."""

    def __init__(self, cov: np.ndarray):
        cov = np.asarray(cov, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError("covariance must be square")
        if np.abs(cov - cov.T).max() > 1e-12 * (np.abs(cov).max() + 1e-300):
            raise ValueError("covariance must be symmetric")
        self.cov = 0.5 * (cov + cov.T)
        try:
            self.chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"covariance not positive definite: {exc}") from exc

    @classmethod
    def isotropic(cls, gamma: float, dim: int) -> "NoiseModel":
        if gamma <= 0:
            raise ValueError("gamma must be positive")
        return cls(gamma * gamma * np.eye(dim))

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        z = rng.standard_normal(self.dim if n is None else (n, self.dim))
        return z @ self.chol.T

    def whiten(self, v: np.ndarray) -> np.ndarray:
        return sla.solve_triangular(self.chol, np.asarray(v, float).T, lower=True).T


@dataclass
class Ensemble:
    """Particle block (J, M) plus the iteration it belongs to."""

    particles: np.ndarray
    iteration: int = 0

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=float))

    @property
    def size(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]

    def mean(self) -> np.ndarray:
        return self.particles.mean(axis=0)

    def spread(self) -> float:
        dev = self.particles - self.mean()
        return float(np.mean(np.linalg.norm(dev, axis=1)))


@dataclass
class KalmanConfig:
    """Run settings for the iterative update.

    mode 'point' targets the regularized least-squares estimate; 'bayes'
    inflates the data covariance by the iteration count.  perturb_scaled
    keeps the observation perturbations at the same (possibly inflated)
    covariance that enters the gain; switch it off to perturb with the
    raw covariance while still damping the gain.
    """

    n_iterations: int
    mode: str = "point"
    seed: int = 0
    model_error: object | None = None   # needs .mean and .cov
    perturb_scaled: bool = True
    threads: int = 1
    record_particles: bool = False
    # when this run is one segment of a longer schedule, the bayes-mode
    # inflation must use the schedule's full step count
    inflation_steps: int | None = None

    def __post_init__(self):
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")
        if self.mode not in ("point", "bayes"):
            raise ValueError(f"mode must be 'point' or 'bayes', got {self.mode!r}")


def empirical_covariances(particles: np.ndarray, gvalues: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cross and output covariance of an ensemble, 1/J normalization.

    Returns (C_up (M, L), C_pp (L, L)).
    """
    particles = np.atleast_2d(particles)
    gvalues = np.atleast_2d(gvalues)
    if particles.shape[0] != gvalues.shape[0]:
        raise ValueError("particle and output counts differ")
    J = particles.shape[0]
    du = particles - particles.mean(axis=0)
    dg = gvalues - gvalues.mean(axis=0)
    c_up = du.T @ dg / J
    c_pp = dg.T @ dg / J
    return c_up, 0.5 * (c_pp + c_pp.T)


def analysis_step(ensemble: Ensemble, gvalues: np.ndarray, y: np.ndarray,
                  gamma_eff: np.ndarray, rng: np.random.Generator | None = None,
                  perturbations: np.ndarray | None = None) -> Ensemble:
    """One Kalman update with perturbed observations.

    perturbations (J, L) overrides the draw; otherwise they are sampled
    from N(0, gamma_eff) using rng.
    """
    U = ensemble.particles
    G = np.atleast_2d(np.asarray(gvalues, dtype=float))
    y = np.asarray(y, dtype=float)
    c_up, c_pp = empirical_covariances(U, G)
    S = c_pp + gamma_eff
    # the regularized gain never amplifies beyond the noise precision
    assert np.linalg.eigvalsh(S)[0] >= np.linalg.eigvalsh(gamma_eff)[0] * (1 - 1e-9)
    cf = sla.cho_factor(S, lower=True)
    if perturbations is None:
        if rng is None:
            raise ValueError("provide rng or explicit perturbations")
        chol = np.linalg.cholesky(gamma_eff)
        perturbations = rng.standard_normal(G.shape) @ chol.T
    innov = y[None, :] + perturbations - G
    delta = sla.cho_solve(cf, innov.T).T @ c_up.T
    return Ensemble(U + delta, iteration=ensemble.iteration + 1)


def ensemble_norm(a, b) -> float:
    """Mean Euclidean distance between paired particles, (1/J) sum |a_j - b_j|."""
    pa = a.particles if isinstance(a, Ensemble) else np.atleast_2d(a)
    pb = b.particles if isinstance(b, Ensemble) else np.atleast_2d(b)
    if pa.shape != pb.shape:
        raise ValueError(f"ensemble shapes differ: {pa.shape} vs {pb.shape}")
    return float(np.mean(np.linalg.norm(pa - pb, axis=1)))


def empirical_measure(ensemble: Ensemble) -> DiscreteMeasure:
    """Equal-weight measure on the particle positions."""
    J = ensemble.size
    return DiscreteMeasure(ensemble.particles.copy(), np.full(J, 1.0 / J))


@dataclass
class EnkfResult:
    ensemble: Ensemble
    mean: np.ndarray
    diagnostics: np.ndarray          # rows: iter, misfit, spread, mean_norm
    corrected_y: np.ndarray
    corrected_cov: np.ndarray
    history: list = field(default_factory=list)


def _evaluate_forward(forward: Callable, U: np.ndarray, iteration: int,
                      threads: int = 1) -> np.ndarray:
    batch = getattr(forward, "batch", None)
    if batch is not None:
        try:
            return np.atleast_2d(np.asarray(batch(U), dtype=float))
        except Exception as exc:
            raise ForwardEvalError(iteration, -1, exc) from exc

    def one(j):
        try:
            return np.asarray(forward(U[j]), dtype=float)
        except Exception as exc:
            raise ForwardEvalError(iteration, j, exc) from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, range(U.shape[0])))
    else:
        rows = [one(j) for j in range(U.shape[0])]
    return np.vstack(rows)


def run_enkf(config: KalmanConfig, forward: Callable, y: np.ndarray,
             initial: Ensemble, noise: NoiseModel) -> EnkfResult:
    """Iterate the ensemble update for a fixed number of steps.

    forward maps a coefficient vector (M,) to observations (L,); an
    optional forward.batch((J, M)) -> (J, L) is used when present.  The
    modelling-error correction, when configured, shifts the data by the
    error mean and widens the covariance before any update.
    """
    y = np.asarray(y, dtype=float)
    cov = noise.cov
    if config.model_error is not None:
        y = y - np.asarray(config.model_error.mean, dtype=float)
        cov = cov + np.asarray(config.model_error.cov, dtype=float)
    n_steps = config.n_iterations
    inflation = config.inflation_steps or n_steps
    gamma_eff = cov * inflation if config.mode == "bayes" else cov
    pert_cov = gamma_eff if config.perturb_scaled else cov
    pert_chol = np.linalg.cholesky(pert_cov)
    cov_inv = np.linalg.inv(cov)

    ens = Ensemble(initial.particles.copy(), iteration=initial.iteration)
    J = ens.size
    initial_spread = ens.spread()
    warned = False
    diag_rows = []
    history = []

    def misfit(mean_vec):
        r = y - _evaluate_forward(forward, mean_vec[None, :], ens.iteration,
                                  config.threads)[0]
        return 0.5 * float(r @ cov_inv @ r)

    for local_it in range(n_steps):
        it = ens.iteration
        mean = ens.mean()
        diag_rows.append((it, misfit(mean), ens.spread(),
                          float(np.linalg.norm(mean))))
        if config.record_particles:
            history.append((it, ens.particles.copy()))
        G = _evaluate_forward(forward, ens.particles, it, config.threads)
        pert = np.empty_like(G)
        for j in range(J):
            z = substream(config.seed, "perturb", it, j).standard_normal(G.shape[1])
            pert[j] = pert_chol @ z
        ens = analysis_step(ens, G, y, gamma_eff, perturbations=pert)
        spread = ens.spread()
        if not warned and initial_spread > 0 and spread > SPREAD_WARN_FACTOR * initial_spread:
            log.warning("ensemble spread grew %.1fx over its initial value "
                        "at iteration %d", spread / initial_spread, it + 1)
            warned = True

    mean = ens.mean()
    diag_rows.append((ens.iteration, misfit(mean), ens.spread(),
                      float(np.linalg.norm(mean))))
    if config.record_particles:
        history.append((ens.iteration, ens.particles.copy()))
    return EnkfResult(ensemble=ens, mean=mean,
                      diagnostics=np.array(diag_rows, dtype=float),
                      corrected_y=y, corrected_cov=cov, history=history)


@dataclass
class LinearForwardModel:
    """G(u) = B u + c, with fast batched evaluation."""

    matrix: np.ndarray
    offset: np.ndarray | None = None

    def __post_init__(self):
        self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if self.offset is None:
            self.offset = np.zeros(self.matrix.shape[0])
        else:
            self.offset = np.asarray(self.offset, dtype=float)

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return self.matrix @ u + self.offset

    def batch(self, U: np.ndarray) -> np.ndarray:
        return U @ self.matrix.T + self.offset
