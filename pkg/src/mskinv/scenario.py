"""Benchmark scenario: two-inclusion log-conductivity, oscillatory
diagonal tensor, sinusoidal Dirichlet loads and twelve boundary hats.

The forward maps share one observation layout: for each Dirichlet datum
the twelve weak-form segment fluxes are stacked, datum-major, into a
single vector of length K * I.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, fields, replace
from typing import Callable

import numpy as np

from .enkf import Ensemble, NoiseModel, substream
from .errors import ConfigError, MisalignmentError, ParameterRangeError
from .fem import (DirichletSolver, FluxProbe, StiffnessAssembler, TensorField,
                  flux_observation, segment_alignment)
from .homogenize import CellMesh, HomogenizedMap, build_cell_mesh, build_homogenized_map
from .meshing import TriMesh, build_structured_mesh, interpolation_matrix
from .prior import KLBasis, build_covariance, kl_decompose, kl_expand

TRUTH_BACKGROUND = 1.3
TRUTH_INCLUSIONS = (
    ((5 / 16, 11 / 16), 0.025, 0.3),    # center, radius^2, contrast
    ((11 / 16, 5 / 16), 0.025, -0.4),
)
SEGMENT_INTERVALS = ((0.1, 0.3), (0.4, 0.6), (0.7, 0.9))
HAT_INTEGRAL = 0.1
# Frobenius norm of dA/dt is at most sqrt(13) e^t for the tensor family
TENSOR_T_LIPSCHITZ = math.sqrt(13.0)

_SIGMA_MINUS_DEFAULT = math.log(0.9) - 0.5
_SIGMA_PLUS_DEFAULT = math.log(1.6) + 0.5


@dataclass(frozen=True)
class ScenarioConfig:
    """Scenario and run parameters; file keys match the field names
    except that the correlation length is spelled 'lambda' on disk."""

    epsilon: float
    h_obs: float
    h: float
    K: int = 3
    I: int = 12
    gamma: float = 0.01
    delta: float = 0.05
    corr_length: float = 0.5
    M: int = 64
    J: int = 200
    N: int = 100
    seed: int = 0
    sigma_minus: float = _SIGMA_MINUS_DEFAULT
    sigma_plus: float = _SIGMA_PLUS_DEFAULT
    mode: str = "point"
    model_error: str = "none"
    N_E: int = 20
    levels: int = 5

    @property
    def n_obs(self) -> int:
        return round(1.0 / self.h_obs)

    @property
    def n_macro(self) -> int:
        return round(1.0 / self.h)

    @property
    def output_dim(self) -> int:
        return self.K * self.I

    def validate(self) -> "ScenarioConfig":
        def bad(key, msg):
            raise ConfigError(msg, key=key)

        if not 0 < self.epsilon < 1:
            bad("epsilon", f"must lie in (0, 1), got {self.epsilon}")
        for key, val in (("h_obs", self.h_obs), ("h", self.h)):
            if not 0 < val < 1:
                bad(key, f"must lie in (0, 1), got {val}")
            n = 1.0 / val
            if abs(n - round(n)) > 1e-9:
                bad(key, f"1/{key} must be an integer, got {val}")
        if self.h_obs > self.epsilon / 8 + 1e-12:
            bad("h_obs", f"must resolve the fine scale: h_obs <= epsilon/8 "
                f"(= {self.epsilon / 8:.6g}), got {self.h_obs}")
        if self.K < 1:
            bad("K", "needs at least one Dirichlet datum")
        if self.I != 12:
            bad("I", "the boundary layout has exactly 12 segments")
        if self.gamma <= 0:
            bad("gamma", "noise level must be positive")
        if self.delta <= 0:
            bad("delta", "prior variance must be positive")
        if self.corr_length <= 0:
            bad("lambda", "correlation length must be positive")
        n_nodes = (self.n_macro + 1) ** 2
        if not 1 <= self.M <= n_nodes:
            bad("M", f"mode count must lie in [1, {n_nodes}]")
        if self.J < 2:
            bad("J", "ensemble needs at least 2 particles")
        if self.N < 1:
            bad("N", "needs at least one iteration")
        if not self.sigma_minus < self.sigma_plus:
            bad("sigma_minus", "bounds must satisfy sigma_minus < sigma_plus")
        if self.mode not in ("point", "bayes"):
            bad("mode", f"must be 'point' or 'bayes', got {self.mode!r}")
        if self.model_error not in ("none", "offline", "online"):
            bad("model_error", f"must be none/offline/online, got {self.model_error!r}")
        if self.N_E < 2:
            bad("N_E", "error estimation needs at least 2 samples")
        if self.levels < 1:
            bad("levels", "needs at least one level")
        if self.model_error == "online":
            if self.N % self.levels != 0:
                bad("levels", f"N = {self.N} does not split evenly over "
                    f"{self.levels} levels")
            if self.N_E % self.levels != 0 or self.N_E // self.levels < 2:
                bad("N_E", f"N_E = {self.N_E} must split over {self.levels} "
                    "levels with at least 2 samples each")
        return self


PRESETS = {
    # quick paired desk runs; epsilon is modest so the fine solves stay cheap
    "desk": ScenarioConfig(epsilon=1 / 16, h_obs=1 / 256, h=1 / 16,
                           M=64, J=200, N=100),
    # full-scale setup as reported for the benchmark
    "paper": ScenarioConfig(epsilon=1 / 64, h_obs=1 / 4096, h=1 / 32,
                            M=100, J=1000, N=500),
    # variant quoted with the convergence figures
    "paper-fig": ScenarioConfig(epsilon=1 / 32, h_obs=1 / 4096, h=1 / 32,
                                M=100, J=500, N=500),
}

_FILE_KEYS = ["epsilon", "h_obs", "h", "K", "I", "gamma", "delta", "lambda",
              "M", "J", "N", "seed", "sigma_minus", "sigma_plus", "mode",
              "model_error", "N_E", "levels"]
_KEY_TO_FIELD = {k: ("corr_length" if k == "lambda" else k) for k in _FILE_KEYS}
_INT_KEYS = {"K", "I", "M", "J", "N", "seed", "N_E", "levels"}
_STR_KEYS = {"mode", "model_error"}
_REQUIRED_KEYS = ("epsilon", "h_obs", "h")


def _parse_number(key: str, text: str) -> float:
    text = text.strip()
    if "/" in text:
        num, _, den = text.partition("/")
        try:
            return float(num) / float(den)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"bad fraction {text!r}", key=key) from exc
    try:
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad number {text!r}", key=key) from exc


def load_config(path: str | os.PathLike) -> ScenarioConfig:
    """Read a flat key = value file; unknown or missing keys raise."""
    values: dict[str, object] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno} is not 'key = value': {raw.strip()!r}")
            key, _, text = line.partition("=")
            key = key.strip()
            text = text.strip()
            if key not in _KEY_TO_FIELD:
                raise ConfigError("unknown key", key=key)
            if key in _STR_KEYS:
                values[_KEY_TO_FIELD[key]] = text
            elif key in _INT_KEYS:
                num = _parse_number(key, text)
                if abs(num - round(num)) > 1e-9:
                    raise ConfigError(f"expected an integer, got {text!r}", key=key)
                values[_KEY_TO_FIELD[key]] = int(round(num))
            else:
                values[_KEY_TO_FIELD[key]] = _parse_number(key, text)
    for key in _REQUIRED_KEYS:
        if _KEY_TO_FIELD[key] not in values:
            raise ConfigError("required key missing", key=key)
    return ScenarioConfig(**values).validate()


def save_config(config: ScenarioConfig, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for key in _FILE_KEYS:
            val = getattr(config, _KEY_TO_FIELD[key])
            fh.write(f"{key} = {val}\n")


def config_hash(config: ScenarioConfig) -> str:
    parts = [f"{f.name}={getattr(config, f.name)!r}" for f in fields(config)]
    return hashlib.sha256(";".join(parts).encode()).hexdigest()


# ---------------------------------------------------------------------------
# fields and data of the benchmark

def truth_sigma(points: np.ndarray) -> np.ndarray:
    """Log conductivity with one raised and one lowered inclusion."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    val = np.full(p.shape[0], TRUTH_BACKGROUND)
    for (cx, cy), r2, contrast in TRUTH_INCLUSIONS:
        inside = (p[:, 0] - cx) ** 2 + (p[:, 1] - cy) ** 2 <= r2
        val = val + contrast * inside
    return np.log(val)


def tensor_entries(t, y: np.ndarray) -> np.ndarray:
    """Oscillatory diagonal tensor A(t, y); t scalar or per-point array."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    et = np.exp(np.asarray(t, dtype=float))
    c1 = np.cos(2 * np.pi * y[:, 0]) ** 2
    c2 = np.cos(2 * np.pi * y[:, 1]) ** 2
    s2 = np.sin(2 * np.pi * y[:, 1])
    out = np.zeros((y.shape[0], 2, 2))
    out[:, 0, 0] = et * (c1 + 1.0) + c2
    out[:, 1, 1] = et * (s2 + 2.0) + c1
    return out


def cell_tensor(t: float) -> TensorField:
    """The tensor family restricted to the unit cell, for homogenization."""
    t = float(t)
    return TensorField(lambda y: tensor_entries(t, y), alpha0=math.exp(t),
                       lipschitz=TENSOR_T_LIPSCHITZ * math.exp(t))


def multiscale_tensor(sigma_fn: Callable, epsilon: float) -> TensorField:
    """Physical-space tensor A(sigma(x), x/epsilon)."""

    def rule(pts):
        pts = np.atleast_2d(pts)
        return tensor_entries(np.asarray(sigma_fn(pts), dtype=float),
                              pts / epsilon)

    return TensorField(rule)


def dirichlet_data(k: int) -> Callable:
    """k-th boundary datum: sqrt(mu_k) times the unit-interval sine
    eigenfunction of order k, composed with x1."""
    if k < 1:
        raise ValueError("datum index starts at 1")
    root_mu = k * np.pi

    def g(pts):
        pts = np.atleast_2d(pts)
        return root_mu * np.sqrt(2.0) * np.sin(k * np.pi * pts[:, 0])

    return g


def observation_layout() -> list[FluxProbe]:
    """Twelve hat-weighted segments, three per side, side-major order."""
    probes = []
    for side in ("bottom", "right", "top", "left"):
        for lo, hi in SEGMENT_INTERVALS:
            probes.append(FluxProbe(side, lo, hi))
    return probes


def check_layout_alignment(mesh: TriMesh) -> None:
    """Raise unless every layout breakpoint is a node of the mesh."""
    for probe in observation_layout():
        if not segment_alignment(probe, mesh):
            raise MisalignmentError(
                f"segment [{probe.lo}, {probe.hi}] on {probe.side!r} needs "
                f"its breakpoints on the mesh; 1/h = {mesh.n} is not a "
                "multiple of 10")


# ---------------------------------------------------------------------------
# prior and meshes

def macro_mesh(config: ScenarioConfig) -> TriMesh:
    return build_structured_mesh(config.n_macro)


def fine_mesh(config: ScenarioConfig) -> TriMesh:
    return build_structured_mesh(config.n_obs)


def build_basis(config: ScenarioConfig, mesh: TriMesh | None = None) -> KLBasis:
    mesh = mesh or macro_mesh(config)
    cov = build_covariance(mesh.nodes, config.delta, config.corr_length)
    return kl_decompose(cov, config.M, mean=0.0)


def prior_sampler(config: ScenarioConfig) -> Callable:
    def sampler(rng, n):
        return rng.standard_normal((n, config.M))
    return sampler


def initial_ensemble(config: ScenarioConfig, seed: int) -> Ensemble:
    """Prior draw of the starting particles from the named substream."""
    rng = substream(seed, "initial-ensemble")
    return Ensemble(rng.standard_normal((config.J, config.M)))


def kl_sup_factor(basis: KLBasis) -> float:
    """sup over nodes of the truncated pointwise standard deviation."""
    var = (basis.modes ** 2) @ basis.eigenvalues
    return float(np.sqrt(var.max()))


def tensor_lipschitz_u(basis: KLBasis, sigma_plus: float) -> float:
    """Lipschitz constant of u -> A(sigma_u(.), .) in the sup norm."""
    return TENSOR_T_LIPSCHITZ * math.exp(sigma_plus) * kl_sup_factor(basis)


def build_scenario_map(config: ScenarioConfig, n_cell: int = 128,
                       n_grid: int = 127, pad: float = 2.0,
                       cell: CellMesh | None = None) -> HomogenizedMap:
    """Tabulated effective tensor over [sigma_minus - pad, sigma_plus + pad].

    The pad covers fields met during inversion, not just the truth band:
    prior draws have pointwise deviation about 0.22, and once the data
    covariance is widened by an estimated model error the perturbed
    updates push particle fields a further unit or so past the bounds,
    tripping the range guard on a narrow table.  The default grid keeps
    the node spacing near 0.044, for interpolation error below 1e-3 in
    every entry.
    """
    cell = cell or build_cell_mesh(n_cell)
    return build_homogenized_map(cell_tensor, config.sigma_minus - pad,
                                 config.sigma_plus + pad, n_grid, cell)


# ---------------------------------------------------------------------------
# forward maps

class MultiscaleForward:
    """Fluxes of the oscillatory problem on the fine observation mesh.

    With a KL basis the parameter vector sets the log conductivity; the
    truth variant fixes sigma as a function of position instead.
    """

    def __init__(self, config: ScenarioConfig, basis: KLBasis | None = None,
                 macro: TriMesh | None = None, quad_order: int = 2):
        self.config = config
        self.mesh = fine_mesh(config)
        self.assembler = StiffnessAssembler(self.mesh, quad_order)
        self.probes = observation_layout()
        self.data = [dirichlet_data(k) for k in range(1, config.K + 1)]
        q = self.assembler.points.reshape(-1, 2)
        y = q / config.epsilon
        self._c1 = np.cos(2 * np.pi * y[:, 0]) ** 2
        self._c2 = np.cos(2 * np.pi * y[:, 1]) ** 2
        self._s2 = np.sin(2 * np.pi * y[:, 1])
        self._qshape = self.assembler.points.shape[:2]
        self.basis = basis
        if basis is not None:
            macro = macro or build_structured_mesh(round(1.0 / config.h))
            if macro.n_nodes != basis.nodes.shape[0]:
                raise ValueError("basis does not live on the macro mesh")
            self._macro = macro
            self._interp = interpolation_matrix(macro, q)

    def _tensor_values(self, sigma_q: np.ndarray) -> np.ndarray:
        et = np.exp(sigma_q)
        vals = np.zeros((sigma_q.size, 2, 2))
        vals[:, 0, 0] = et * (self._c1 + 1.0) + self._c2
        vals[:, 1, 1] = et * (self._s2 + 2.0) + self._c1
        return vals.reshape(*self._qshape, 2, 2)

    def _fluxes_for(self, sigma_q: np.ndarray, sigma_fn: Callable) -> np.ndarray:
        field = multiscale_tensor(sigma_fn, self.config.epsilon)
        solver = DirichletSolver(self.mesh, field, assembler=self.assembler,
                                 tensor_values=self._tensor_values(sigma_q))
        out = np.empty(self.config.output_dim)
        I = self.config.I
        for k, g in enumerate(self.data):
            sol = solver.solve(f=None, g=g)
            out[k * I:(k + 1) * I] = flux_observation(sol, self.probes)
        return out

    def truth_fluxes(self) -> np.ndarray:
        q = self.assembler.points.reshape(-1, 2)
        return self._fluxes_for(truth_sigma(q), truth_sigma)

    def __call__(self, u: np.ndarray) -> np.ndarray:
        if self.basis is None:
            raise ValueError("this forward was built without a KL basis")
        sigma_nodal = kl_expand(self.basis, np.asarray(u, dtype=float))
        sigma_q = self._interp @ sigma_nodal

        def sigma_fn(pts):
            return interpolation_matrix(self._macro, pts) @ sigma_nodal

        return self._fluxes_for(sigma_q, sigma_fn)


class HomogenizedForward:
    """Fluxes of the effective problem on the macro mesh, with the
    tensor looked up in a tabulated homogenized map."""

    def __init__(self, config: ScenarioConfig, basis: KLBasis,
                 hmap: HomogenizedMap, mesh: TriMesh | None = None,
                 quad_order: int = 2):
        self.config = config
        self.mesh = mesh or macro_mesh(config)
        if self.mesh.n_nodes != basis.nodes.shape[0]:
            raise ValueError("basis does not live on the macro mesh")
        self.basis = basis
        self.hmap = hmap
        self.assembler = StiffnessAssembler(self.mesh, quad_order)
        self.probes = observation_layout()
        self.data = [dirichlet_data(k) for k in range(1, config.K + 1)]
        self._bary = self.assembler.bary          # (Q, 3)

    def __call__(self, u: np.ndarray) -> np.ndarray:
        sigma_nodal = kl_expand(self.basis, np.asarray(u, dtype=float))
        sigma_q = np.einsum("qk,tk->tq", self._bary,
                            sigma_nodal[self.mesh.triangles])
        tensors = self.hmap(sigma_q.ravel()).reshape(*sigma_q.shape, 2, 2)
        field = self.hmap.as_tensor_field(
            lambda pts: interpolation_matrix(self.mesh, pts) @ sigma_nodal)
        solver = DirichletSolver(self.mesh, field, assembler=self.assembler,
                                 tensor_values=tensors)
        out = np.empty(self.config.output_dim)
        I = self.config.I
        for k, g in enumerate(self.data):
            sol = solver.solve(f=None, g=g)
            out[k * I:(k + 1) * I] = flux_observation(sol, self.probes)
        return out


# ---------------------------------------------------------------------------
# data generation and field errors

@dataclass
class ObservationSet:
    y: np.ndarray
    noiseless: np.ndarray
    gamma_used: float
    seed: int
    config: ScenarioConfig


def generate_observations(config: ScenarioConfig,
                          gamma_override: float | None = None) -> ObservationSet:
    """Noisy fluxes of the truth field at the configured fine resolution.

    gamma_override replaces the noise level for the draw only; zero gives
    noiseless data.
    """
    config.validate()
    fwd = MultiscaleForward(config)
    y0 = fwd.truth_fluxes()
    gamma = config.gamma if gamma_override is None else float(gamma_override)
    if gamma < 0:
        raise ConfigError("noise override must be >= 0", key="gamma")
    rng = substream(config.seed, "data-noise")
    eta = gamma * rng.standard_normal(y0.size)
    return ObservationSet(y=y0 + eta, noiseless=y0, gamma_used=gamma,
                          seed=config.seed, config=config)


def noise_model(config: ScenarioConfig) -> NoiseModel:
    return NoiseModel.isotropic(config.gamma, config.output_dim)


def relative_field_error(mesh: TriMesh, nodal: np.ndarray,
                         reference_fn: Callable, n_eval: int = 256) -> float:
    """Relative L2 gap between a nodal P1 field and a reference function,
    by midpoint quadrature on an n_eval^2 grid."""
    g = (np.arange(n_eval) + 0.5) / n_eval
    X, Y = np.meshgrid(g, g, indexing="xy")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    approx = interpolation_matrix(mesh, pts) @ np.asarray(nodal, dtype=float)
    ref = np.asarray(reference_fn(pts), dtype=float)
    return float(np.linalg.norm(approx - ref) / np.linalg.norm(ref))
