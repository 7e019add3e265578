"""Estimation and correction of the surrogate modelling error.

The error is the observation gap between the reference forward map and
its cheap surrogate, modelled as a Gaussian.  Offline estimation samples
the prior once; the online variant re-estimates from the current
ensemble at the start of each level.  Sample-size rules follow the
concentration bounds for the mean (Hoeffding) and covariance (McDiarmid)
of bounded error vectors.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .enkf import Ensemble, EnkfResult, KalmanConfig, NoiseModel, run_enkf, substream


@dataclass
class ModellingErrorModel:
    """Gaussian N(mean, cov) for the observation-space model error.

    skewness and excess kurtosis of the samples are carried as
    diagnostics only; nothing downstream acts on them.
    """

    mean: np.ndarray
    cov: np.ndarray
    n_samples: int
    skewness: np.ndarray | None = None
    kurtosis: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).ravel()
        self.cov = np.asarray(self.cov, dtype=float)
        L = self.mean.size
        if self.cov.shape != (L, L):
            raise ValueError("covariance shape does not match the mean")
        if np.abs(self.cov - self.cov.T).max() > 1e-10 * (np.abs(self.cov).max() + 1e-300):
            raise ValueError("covariance must be symmetric")
        w = np.linalg.eigvalsh(self.cov)
        if w.size and w[0] < -1e-10 * max(1.0, w[-1]):
            raise ValueError(f"covariance indefinite: min eigenvalue {w[0]:.3e}")

    @classmethod
    def zero(cls, dim: int) -> "ModellingErrorModel":
        return cls(np.zeros(dim), np.zeros((dim, dim)), n_samples=0)


def error_samples(samples: np.ndarray, forward_fine: Callable,
                  forward_coarse: Callable) -> np.ndarray:
    U = np.atleast_2d(np.asarray(samples, dtype=float))
    rows = [np.asarray(forward_fine(u), dtype=float)
            - np.asarray(forward_coarse(u), dtype=float) for u in U]
    return np.vstack(rows)


def _shape_moments(dev: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Biased per-component skewness and excess kurtosis; zero where the
    samples have no spread."""
    var = (dev ** 2).mean(axis=0)
    safe = np.where(var > 0, var, 1.0)
    skew = np.where(var > 0, (dev ** 3).mean(axis=0) / safe ** 1.5, 0.0)
    kurt = np.where(var > 0, (dev ** 4).mean(axis=0) / safe ** 2 - 3.0, 0.0)
    return skew, kurt


def estimate_from_errors(E: np.ndarray, meta: dict | None = None) -> ModellingErrorModel:
    E = np.atleast_2d(E)
    n = E.shape[0]
    if n < 2:
        raise ValueError("at least 2 error samples are required")
    m = E.mean(axis=0)
    dev = E - m
    cov = dev.T @ dev / (n - 1)
    skew, kurt = _shape_moments(dev)
    return ModellingErrorModel(
        mean=m, cov=0.5 * (cov + cov.T), n_samples=n,
        skewness=skew, kurtosis=kurt, meta=dict(meta or {}))


def estimate_offline(sampler: Callable, forward_fine: Callable,
                     forward_coarse: Callable, n_samples: int,
                     rng: np.random.Generator,
                     meta: dict | None = None) -> ModellingErrorModel:
    """Gaussian fit of the model error over prior draws.

    sampler(rng, n) must return an (n, M) block of parameter samples.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    U = np.atleast_2d(np.asarray(sampler(rng, n_samples), dtype=float))
    E = error_samples(U, forward_fine, forward_coarse)
    return estimate_from_errors(E, meta=meta)


def apply_correction(y: np.ndarray, cov: np.ndarray,
                     model: ModellingErrorModel) -> tuple[np.ndarray, np.ndarray]:
    """Shifted data and widened covariance (y - m, cov + Sigma)."""
    y = np.asarray(y, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if y.size != model.mean.size or cov.shape != model.cov.shape:
        raise ValueError("dimension mismatch between data and model")
    return y - model.mean, cov + model.cov


def estimate_constant(sampler: Callable, forward_fine: Callable,
                      forward_coarse: Callable, rng: np.random.Generator,
                      eps: float, h: float, s: int = 1,
                      pilot: int = 10) -> float:
    """Pilot estimate of the boundedness constant: the largest observed
    |E_i|_2 relative to eps + h^(s+1)."""
    U = np.atleast_2d(np.asarray(sampler(rng, pilot), dtype=float))
    E = error_samples(U, forward_fine, forward_coarse)
    scale = eps + h ** (s + 1)
    return float(np.linalg.norm(E, axis=1).max() / scale)


def sample_size_mean(eta: float, alpha: float, L: int, C_E: float,
                     eps: float, h: float, s: int = 1) -> int:
    """Samples guaranteeing |m - m*|_2 <= eta with probability 1 - alpha
    for errors bounded by C_E (eps + h^(s+1))."""
    if not (0 < alpha < 1) or eta <= 0:
        raise ValueError("need eta > 0 and 0 < alpha < 1")
    n = 4.0 * C_E**2 * (L / eta**2) * math.log(2.0 * L / alpha) \
        * (eps**2 + h ** (2 * (s + 1)))
    return max(2, math.ceil(n))


def sample_size_cov(eta: float, alpha: float, L: int, C_E: float,
                    eps: float, h: float, s: int = 1) -> int:
    """Samples guaranteeing |Sigma - Sigma*|_2 <= eta with probability
    1 - alpha; always at least the mean rule's count in practice."""
    if not (0 < alpha < 1) or eta <= 0:
        raise ValueError("need eta > 0 and 0 < alpha < 1")
    n = 2304.0 * C_E**4 * (L**2 / eta**2) * math.log(2.0 * L**2 / alpha) \
        * (eps**4 + h ** (4 * (s + 1)))
    return max(2, math.ceil(n))


@dataclass(frozen=True)
class OnlineSchedule:
    """Level layout for on-the-fly error estimation.

    iterations_per_level must sum to the run's total iteration count.
    """

    levels: int
    samples_per_level: int
    iterations_per_level: tuple[int, ...]

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.samples_per_level < 2:
            raise ValueError("samples_per_level must be >= 2")
        if len(self.iterations_per_level) != self.levels:
            raise ValueError("one iteration count per level required")
        if any(n < 1 for n in self.iterations_per_level):
            raise ValueError("each level needs at least one iteration")

    @classmethod
    def uniform(cls, levels: int, samples_per_level: int,
                total_iterations: int) -> "OnlineSchedule":
        if total_iterations % levels != 0:
            raise ValueError(f"{total_iterations} iterations do not split "
                             f"evenly over {levels} levels")
        per = total_iterations // levels
        return cls(levels, samples_per_level, (per,) * levels)

    @property
    def total_iterations(self) -> int:
        return int(sum(self.iterations_per_level))

    @property
    def total_samples(self) -> int:
        return self.levels * self.samples_per_level


@dataclass
class OnlineResult:
    result: EnkfResult
    level_models: list[ModellingErrorModel]


def run_online(config: KalmanConfig, schedule: OnlineSchedule,
               forward_fine: Callable, forward_coarse: Callable,
               y: np.ndarray, initial: Ensemble,
               noise: NoiseModel) -> OnlineResult:
    """EnKF on the surrogate with level-wise error re-estimation.

    At each level the error model is refit from samples drawn uniformly
    with replacement out of the current ensemble, the corrected data and
    covariance are installed, and the level's iterations run.  With
    identical forward maps every level model is exactly zero and the run
    reproduces a plain surrogate inversion with the same seed.
    """
    if schedule.total_iterations != config.n_iterations:
        raise ValueError(
            f"schedule covers {schedule.total_iterations} iterations, "
            f"config expects {config.n_iterations}")
    if config.model_error is not None:
        raise ValueError("online runs manage the error model themselves")
    ens = Ensemble(initial.particles.copy(), iteration=initial.iteration)
    models: list[ModellingErrorModel] = []
    diag_blocks = []
    history = []
    for level, n_iter in enumerate(schedule.iterations_per_level):
        stream = substream(config.seed, "model-error", level)
        idx = stream.integers(0, ens.size, size=schedule.samples_per_level)
        E = error_samples(ens.particles[idx], forward_fine, forward_coarse)
        model = estimate_from_errors(E, meta={"level": level})
        models.append(model)
        level_cfg = replace(config, n_iterations=n_iter, model_error=model,
                            inflation_steps=config.n_iterations)
        seg = run_enkf(level_cfg, forward_coarse, y, ens, noise)
        ens = seg.ensemble
        diag_blocks.append(seg.diagnostics if not diag_blocks
                           else seg.diagnostics[1:])
        history.extend(seg.history if not history else seg.history[1:])
    final = EnkfResult(ensemble=ens, mean=ens.mean(),
                       diagnostics=np.vstack(diag_blocks),
                       corrected_y=y - models[-1].mean,
                       corrected_cov=noise.cov + models[-1].cov,
                       history=history)
    return OnlineResult(result=final, level_models=models)


def save_model(model: ModellingErrorModel, directory: str | os.PathLike) -> dict:
    """Write m.csv, sigma.csv and model_meta.json; returns the manifest
    fragment (file names with row counts plus the recorded constants)."""
    os.makedirs(directory, exist_ok=True)
    L = model.mean.size
    m_path = os.path.join(directory, "m.csv")
    with open(m_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["index", "value"])
        for i, v in enumerate(model.mean):
            wr.writerow([i, repr(float(v))])
    s_path = os.path.join(directory, "sigma.csv")
    with open(s_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["row", "col", "value"])
        for i in range(L):
            for j in range(L):
                wr.writerow([i, j, repr(float(model.cov[i, j]))])
    meta = {"n_samples": int(model.n_samples), **model.meta}
    with open(os.path.join(directory, "model_meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return {"files": {"m.csv": L, "sigma.csv": L * L}, "meta": meta}


def load_model(directory: str | os.PathLike) -> ModellingErrorModel:
    with open(os.path.join(directory, "m.csv"), newline="") as fh:
        rd = csv.reader(fh)
        next(rd)
        mean = np.array([float(row[1]) for row in rd])
    L = mean.size
    cov = np.zeros((L, L))
    with open(os.path.join(directory, "sigma.csv"), newline="") as fh:
        rd = csv.reader(fh)
        next(rd)
        for i, j, v in rd:
            cov[int(i), int(j)] = float(v)
    with open(os.path.join(directory, "model_meta.json")) as fh:
        meta = json.load(fh)
    n = int(meta.pop("n_samples", 0))
    return ModellingErrorModel(mean=mean, cov=cov, n_samples=n,
                               meta={k: v for k, v in meta.items() if v is not None})
