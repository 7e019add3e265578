"""Convergence, bound and coverage studies reported by the command line.

Each study returns a StudyReport carrying the raw measurement rows, a
summary dict and a verdict against its pinned threshold, so the same
routine backs both the CLI report files and the release test suite.
"""

from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .enkf import (KalmanConfig, LinearForwardModel, NoiseModel,
                   empirical_covariances, ensemble_norm, run_enkf, substream)
from .fem import isotropic_tensor, l2_error, solve_dirichlet
from .meshing import build_structured_mesh
from .model_error import sample_size_cov, sample_size_mean
from .scenario import (PRESETS, MultiscaleForward, build_basis,
                       build_scenario_map, macro_mesh)
from .transport import (DiscreteMeasure, wasserstein_discrete,
                        wasserstein_upper_bound)


@dataclass
class StudyReport:
    kind: str
    header: tuple[str, ...]
    rows: list[tuple]
    summary: dict
    passed: bool


def write_report(report: StudyReport, directory: str | os.PathLike) -> dict:
    """Write study_<kind>.csv plus summary.csv; returns the manifest
    fragment mapping file names to row counts."""
    import csv

    os.makedirs(directory, exist_ok=True)
    data_name = f"study_{report.kind}.csv"
    with open(os.path.join(directory, data_name), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(report.header)
        for row in report.rows:
            wr.writerow([repr(v) if isinstance(v, float) else v for v in row])
    with open(os.path.join(directory, "summary.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["key", "value"])
        for key in sorted(report.summary):
            wr.writerow([key, repr(report.summary[key])])
        wr.writerow(["passed", report.passed])
    return {data_name: len(report.rows),
            "summary.csv": len(report.summary) + 1}


# -- discretization order -------------------------------------------------

def study_fem_rate(sizes: tuple[int, ...] = (8, 16, 32, 64),
                   seed: int = 0) -> StudyReport:
    """L2 convergence order on a manufactured Dirichlet problem.

    Deterministic; the seed argument only keeps the study call signature
    uniform.  Linear elements should give order two.
    """
    def exact(pts):
        return np.sin(np.pi * pts[:, 0]) * np.sin(np.pi * pts[:, 1])

    def load(pts):
        return 2.0 * np.pi ** 2 * exact(pts)

    tensor = isotropic_tensor(1.0)
    rows = []
    errors = []
    for n in sizes:
        sol = solve_dirichlet(build_structured_mesh(n), tensor, f=load)
        err = l2_error(sol, exact)
        local = (math.log(errors[-1] / err) / math.log(2.0)
                 if errors else float("nan"))
        errors.append(err)
        rows.append((n, 1.0 / n, err, local))
    hs = np.log([1.0 / n for n in sizes])
    rate = float(np.polyfit(hs, np.log(errors), 1)[0])
    passed = 1.8 <= rate <= 2.2
    return StudyReport("fem_rate", ("n", "h", "l2_error", "local_rate"),
                       rows, {"rate": rate, "lo": 1.8, "hi": 2.2}, passed)


# -- surrogate gap in the oscillation period ------------------------------

def study_homog_rate(epsilons: tuple[float, ...] = (0.25, 0.125, 0.0625),
                     seed: int = 0, n_cell: int = 64) -> StudyReport:
    """Observation gap between the oscillatory and effective forward maps.

    One fixed prior draw of the field.  Both problems are solved on the
    mesh that resolves each period with sixteen cells, so the shared
    discretization error cancels and the gap isolates the homogenization
    part, which should shrink roughly linearly in the period.
    """
    from .fem import DirichletSolver, flux_observation
    from .prior import kl_expand
    from .meshing import interpolation_matrix
    from .scenario import dirichlet_data, fine_mesh, observation_layout

    base = PRESETS["desk"]
    mesh = macro_mesh(base)
    basis = build_basis(base, mesh)
    hmap = build_scenario_map(base, n_cell=n_cell)
    u = substream(seed, "homog-rate-field").standard_normal(base.M)
    sigma_nodal = kl_expand(basis, u)
    field = hmap.as_tensor_field(
        lambda pts: interpolation_matrix(mesh, pts) @ sigma_nodal)
    probes = observation_layout()
    rows = []
    gaps = []
    for eps in epsilons:
        cfg = replace(base, epsilon=eps, h_obs=eps / 16.0)
        fine = MultiscaleForward(cfg, basis=basis, macro=mesh)
        solver = DirichletSolver(fine_mesh(cfg), field)
        effective = np.concatenate([
            flux_observation(solver.solve(g=dirichlet_data(k)), probes)
            for k in range(1, cfg.K + 1)])
        gap = float(np.linalg.norm(fine(u) - effective))
        local = (math.log(gaps[-1] / gap)
                 / math.log(epsilons[len(gaps) - 1] / eps)
                 if gaps else float("nan"))
        gaps.append(gap)
        rows.append((eps, gap, local))
    slope = float(np.polyfit(np.log(epsilons), np.log(gaps), 1)[0])
    return StudyReport("homog_rate", ("epsilon", "gap", "local_rate"),
                       rows, {"slope": slope, "threshold": 0.7},
                       slope >= 0.7)


# -- transport distance against its coupling bound ------------------------

def study_wasserstein_bound(n_pairs: int = 1000, seed: int = 0,
                            exhaustive_limit: int = 6,
                            slack: float = 1e-9) -> StudyReport:
    """Exact transport cost versus the paired-particle upper bound.

    Random equal-size particle blocks; checks, per pair, that the optimal
    cost never exceeds the identity-coupling bound, that the assignment
    route agrees with a brute-force minimum over permutations for small
    ensembles, and (on a subsample) that the general LP route reproduces
    the assignment value once the uniform weights are jittered past the
    fast-path tolerance.
    """
    rng = substream(seed, "wasserstein-pairs")
    orders = ((1.0, 2.0), (2.0, 2.0), (1.0, float("inf")))
    violations = 0
    perm_mismatch = 0
    lp_mismatch = 0
    n_exhaustive = 0
    n_lp = 0
    worst_margin = -float("inf")
    rows = []
    for i in range(n_pairs):
        J = int(rng.integers(2, 13))
        d = int(rng.integers(1, 4))
        p, s = orders[int(rng.integers(0, len(orders)))]
        a = rng.standard_normal((J, d))
        b = rng.standard_normal((J, d)) + rng.normal(0, 2, size=d)
        mu = DiscreteMeasure(a, np.full(J, 1.0 / J))
        nu = DiscreteMeasure(b, np.full(J, 1.0 / J))
        dist = wasserstein_discrete(mu, nu, p=p, s=s)
        bound = wasserstein_upper_bound(a, b, p=p, s=s)
        margin = dist - bound
        worst_margin = max(worst_margin, margin)
        if margin > slack:
            violations += 1
        if J <= exhaustive_limit:
            n_exhaustive += 1
            if np.isinf(s):
                cost = np.abs(a[:, None, :] - b[None, :, :]).max(axis=2) ** p
            else:
                cost = np.sum(np.abs(a[:, None, :] - b[None, :, :]) ** s,
                              axis=2) ** (p / s)
            best = min(cost[range(J), perm].sum()
                       for perm in itertools.permutations(range(J)))
            if abs((best / J) ** (1.0 / p) - dist) > 1e-9:
                perm_mismatch += 1
        if i % 50 == 0:
            # jitter the weights past the uniform fast path so the
            # general LP solves this pair, then compare routes
            n_lp += 1
            w = np.full(J, 1.0 / J)
            w[0] += 1e-7
            w[1] -= 1e-7
            lp = wasserstein_discrete(DiscreteMeasure(a, w),
                                      DiscreteMeasure(b, w), p=p, s=s)
            if abs(lp - dist) > 1e-5 * max(dist, 1.0):
                lp_mismatch += 1
        rows.append((i, J, d, p, s, dist, bound, margin))
    summary = {"pairs": n_pairs, "violations": violations,
               "worst_margin": worst_margin,
               "exhaustive_checked": n_exhaustive,
               "perm_mismatch": perm_mismatch,
               "lp_checked": n_lp, "lp_mismatch": lp_mismatch}
    passed = violations == 0 and perm_mismatch == 0 and lp_mismatch == 0
    return StudyReport("wasserstein_bound",
                       ("pair", "J", "dim", "p", "s", "distance", "bound",
                        "margin"), rows, summary, passed)


# -- sample-size guarantees on bounded errors ------------------------------

def _bounded_errors(rng: np.random.Generator, n: int, L: int,
                    scale: float) -> np.ndarray:
    # components uniform on [-0.5, 1]: skewed, mean 0.25, sup norm 1,
    # so |row|_2 <= scale exactly (C_E = 1)
    return rng.uniform(-0.5, 1.0, size=(n, L)) * (scale / math.sqrt(L))


def study_hoeffding(n_reps: int = 200, seed: int = 0, eta: float = 0.1,
                    alpha: float = 0.1, L: int = 12, eps: float = 0.25,
                    h: float = 1.0 / 16.0, s: int = 1,
                    cov_L: int = 2) -> StudyReport:
    """Coverage of the mean and covariance sample-size rules.

    Synthetic error rows bounded by eps + h^(s+1) with C_E = 1; the
    reference moments come from a large control sample.  The covariance
    rule is checked at a reduced dimension because its sample count grows
    with the square of the output size.
    """
    scale = eps + h ** (s + 1)
    n_mean = sample_size_mean(eta, alpha, L, 1.0, eps, h, s)
    ref = _bounded_errors(substream(seed, "coverage-ref"), 100_000, L, scale)
    m_star = ref.mean(axis=0)
    hits = 0
    for r in range(n_reps):
        E = _bounded_errors(substream(seed, "coverage-mean", r), n_mean, L,
                            scale)
        if np.linalg.norm(E.mean(axis=0) - m_star) <= eta:
            hits += 1
    cov_mean = hits / n_reps

    n_cov = sample_size_cov(eta, alpha, cov_L, 1.0, eps, h, s)
    ref_c = _bounded_errors(substream(seed, "coverage-ref-cov"), 100_000,
                            cov_L, scale)
    dev = ref_c - ref_c.mean(axis=0)
    sigma_star = dev.T @ dev / (ref_c.shape[0] - 1)
    hits_c = 0
    for r in range(n_reps):
        E = _bounded_errors(substream(seed, "coverage-cov", r), n_cov,
                            cov_L, scale)
        d = E - E.mean(axis=0)
        sigma = d.T @ d / (n_cov - 1)
        if np.linalg.norm(sigma - sigma_star, 2) <= eta:
            hits_c += 1
    cov_cov = hits_c / n_reps

    rows = [("mean", L, n_mean, n_reps, cov_mean),
            ("cov", cov_L, n_cov, n_reps, cov_cov)]
    summary = {"eta": eta, "alpha": alpha, "coverage_mean": cov_mean,
               "coverage_cov": cov_cov, "n_mean": n_mean, "n_cov": n_cov}
    passed = cov_mean >= 1.0 - alpha and cov_cov >= 1.0 - alpha
    return StudyReport("hoeffding",
                       ("moment", "L", "n_samples", "reps", "coverage"),
                       rows, summary, passed)


# -- filter against the conjugate posterior --------------------------------

BAYES_MATRIX = np.array([[1.0, 0.3, 0.0],
                         [0.2, 1.1, 0.4],
                         [0.0, 0.5, 0.9],
                         [0.7, 0.0, 0.2]])
BAYES_TRUTH = np.array([0.8, -0.5, 1.2])
BAYES_GAMMA = 0.5


def conjugate_posterior(B: np.ndarray, y: np.ndarray,
                        gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian posterior for a standard-normal prior, linear map B and
    isotropic observation noise."""
    M = B.shape[1]
    precision = np.eye(M) + B.T @ B / gamma ** 2
    cov = np.linalg.inv(precision)
    mean = cov @ (B.T @ y) / gamma ** 2
    return mean, cov


def study_bayes_linear(n_particles: int = 10_000, seed: int = 0,
                       n_steps: int = 10) -> StudyReport:
    """Statistical-mode run on a fixed linear problem versus the closed
    form posterior.

    Per-coordinate empirical means must land within five standard errors
    and the particle covariance within ten percent relative Frobenius.
    """
    from .enkf import Ensemble

    B = BAYES_MATRIX
    y = B @ BAYES_TRUTH + BAYES_GAMMA * substream(
        seed, "bayes-data").standard_normal(B.shape[0])
    post_mean, post_cov = conjugate_posterior(B, y, BAYES_GAMMA)
    init = Ensemble(substream(seed, "bayes-init").standard_normal(
        (n_particles, B.shape[1])))
    res = run_enkf(KalmanConfig(n_iterations=n_steps, mode="bayes",
                                seed=seed),
                   LinearForwardModel(B), y, init,
                   NoiseModel.isotropic(BAYES_GAMMA, B.shape[0]))
    emp_mean = res.mean
    part = res.ensemble.particles
    d = part - emp_mean
    emp_cov = d.T @ d / (n_particles - 1)

    tol = 5.0 / math.sqrt(n_particles) * np.sqrt(np.diag(post_cov))
    mean_ok = np.all(np.abs(emp_mean - post_mean) <= tol)
    cov_rel = (np.linalg.norm(emp_cov - post_cov)
               / np.linalg.norm(post_cov))
    rows = [(i, float(post_mean[i]), float(emp_mean[i]), float(tol[i]))
            for i in range(B.shape[1])]
    summary = {"cov_rel_frobenius": float(cov_rel), "cov_tol": 0.1,
               "mean_ok": bool(mean_ok), "n_particles": n_particles}
    return StudyReport("bayes_linear",
                       ("coord", "posterior_mean", "ensemble_mean",
                        "mean_tol"), rows, summary,
                       bool(mean_ok) and cov_rel <= 0.1)


# -- ensemble covariance bounds --------------------------------------------

def _ball_ensemble(rng: np.random.Generator, J: int, center: np.ndarray,
                   radius: float) -> np.ndarray:
    dirs = rng.standard_normal((J, center.size))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return center + radius * rng.uniform(0, 1, size=(J, 1)) * dirs


def covariance_bound_suite(n_instances: int = 500,
                           seed: int = 0) -> StudyReport:
    """Empirical-covariance bounds for ball-confined ensembles under a
    Lipschitz forward map, plus the two matrix inequalities used with
    them.

    Constants per instance: m = R + |u*|, M = C_G R + |G(u*)|; the cross
    covariance is bounded by 4Mm, the output covariance by 4M^2, and
    their ensemble-to-ensemble increments by 2(J+1)(m C_G + M) and
    4(J+1) M C_G times the mean particle distance.
    """
    checks = {"c_up": 0.0, "c_pp": 0.0, "c_up_lip": 0.0, "c_pp_lip": 0.0,
              "inv_diff": 0.0, "inv_sum": 0.0}
    violations = dict.fromkeys(checks, 0)
    for i in range(n_instances):
        rng = substream(seed, "cov-bounds", i)
        M_dim = int(rng.integers(2, 7))
        L = int(rng.integers(2, 7))
        J = int(rng.integers(2, 9))
        B = rng.standard_normal((L, M_dim))
        c = rng.standard_normal(L)
        lip = float(np.linalg.norm(B, 2))
        u_star = rng.standard_normal(M_dim)
        R = float(rng.uniform(0.5, 2.0))
        m = R + float(np.linalg.norm(u_star))
        big_m = lip * R + float(np.linalg.norm(B @ u_star + c))

        U1 = _ball_ensemble(rng, J, u_star, R)
        U2 = _ball_ensemble(rng, J, u_star, R)
        G1, G2 = U1 @ B.T + c, U2 @ B.T + c
        cup1, cpp1 = empirical_covariances(U1, G1)
        cup2, cpp2 = empirical_covariances(U2, G2)
        dist = ensemble_norm(U1, U2)

        ratios = {
            "c_up": np.linalg.norm(cup1, 2) / (4 * big_m * m),
            "c_pp": np.linalg.norm(cpp1, 2) / (4 * big_m ** 2),
            "c_up_lip": (np.linalg.norm(cup1 - cup2, 2)
                         / (2 * (J + 1) * (m * lip + big_m) * dist)),
            "c_pp_lip": (np.linalg.norm(cpp1 - cpp2, 2)
                         / (4 * (J + 1) * big_m * lip * dist)),
        }

        Z = rng.standard_normal((L, int(rng.integers(1, L + 1))))
        A_psd = Z @ Z.T
        W = rng.standard_normal((L, L))
        B_spd = W @ W.T + 0.1 * np.eye(L)
        A_inv_b = A_psd + 0.1 * np.eye(L)
        ratios["inv_diff"] = (
            np.linalg.norm(np.linalg.inv(A_inv_b) - np.linalg.inv(B_spd), 2)
            / (np.linalg.norm(np.linalg.inv(A_inv_b), 2)
               * np.linalg.norm(np.linalg.inv(B_spd), 2)
               * np.linalg.norm(A_inv_b - B_spd, 2)))
        ratios["inv_sum"] = (
            np.linalg.norm(np.linalg.inv(A_psd + B_spd), 2)
            / np.linalg.norm(np.linalg.inv(B_spd), 2))

        for key, ratio in ratios.items():
            checks[key] = max(checks[key], float(ratio))
            if ratio > 1.0 + 1e-9:
                violations[key] += 1

    rows = [(key, n_instances, violations[key], checks[key])
            for key in sorted(checks)]
    summary = {f"worst_{k}": v for k, v in checks.items()}
    summary["total_violations"] = sum(violations.values())
    passed = summary["total_violations"] == 0
    return StudyReport("covariance_bounds",
                       ("check", "instances", "violations", "worst_ratio"),
                       rows, summary, passed)


STUDY_KINDS = {
    "fem_rate": study_fem_rate,
    "homog_rate": study_homog_rate,
    "wasserstein_bound": study_wasserstein_bound,
    "hoeffding": study_hoeffding,
    "bayes_linear": study_bayes_linear,
}
