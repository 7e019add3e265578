"""Karhunen-Loeve prior for the log-conductivity field.

The covariance is the exponential kernel on the macro-mesh nodes; the
expansion is its dense symmetric eigendecomposition truncated to the
leading modes.  Coefficient vectors are standard normal.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PriorCovariance:
    """Nodal covariance  C_ij = delta * exp(-|x_i - x_j|_2 / corr_length)."""

    nodes: np.ndarray
    delta: float
    corr_length: float
    matrix: np.ndarray


@dataclass(frozen=True)
class KLBasis:
    """Truncated eigenpairs of a PriorCovariance.

    eigenvalues are sorted descending; each eigenvector's largest-magnitude
    entry is positive, which pins the otherwise arbitrary signs.
    """

    nodes: np.ndarray
    mean: np.ndarray           # sigma_0 at the nodes
    eigenvalues: np.ndarray    # (M,)
    modes: np.ndarray          # (N_h, M), orthonormal columns

    @property
    def n_modes(self) -> int:
        return int(self.eigenvalues.size)


def build_covariance(nodes: np.ndarray, delta: float, corr_length: float) -> PriorCovariance:
    if delta <= 0 or corr_length <= 0:
        raise ValueError("delta and corr_length must be positive")
    nodes = np.asarray(nodes, dtype=float)
    diff = nodes[:, None, :] - nodes[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    return PriorCovariance(nodes=nodes, delta=float(delta),
                           corr_length=float(corr_length),
                           matrix=delta * np.exp(-dist / corr_length))


def kl_decompose(cov: PriorCovariance, n_modes: int,
                 mean: np.ndarray | float = 0.0) -> KLBasis:
    """Leading n_modes eigenpairs of the covariance.

    Raises if the matrix is numerically indefinite or n_modes exceeds the
    node count.
    """
    n = cov.matrix.shape[0]
    if not 1 <= n_modes <= n:
        raise ValueError(f"n_modes must be in [1, {n}], got {n_modes}")
    w, v = np.linalg.eigh(cov.matrix)
    if w[0] < -1e-8 * cov.delta:
        raise ValueError(f"covariance indefinite: min eigenvalue {w[0]:.3e}")
    order = np.argsort(w)[::-1][:n_modes]
    lam = np.clip(w[order], 0.0, None)
    modes = v[:, order]
    peak = np.argmax(np.abs(modes), axis=0)
    signs = np.sign(modes[peak, np.arange(n_modes)])
    signs[signs == 0] = 1.0
    modes = modes * signs
    mean_vec = np.broadcast_to(np.asarray(mean, dtype=float), (n,)).copy()
    return KLBasis(nodes=cov.nodes, mean=mean_vec, eigenvalues=lam, modes=modes)


def kl_expand(basis: KLBasis, coeffs: np.ndarray) -> np.ndarray:
    """Nodal field(s) from coefficient vector(s).

    coeffs (M,) gives one field (N_h,); coeffs (J, M) gives (J, N_h).
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[-1] != basis.n_modes:
        raise ValueError(f"expected {basis.n_modes} coefficients, "
                         f"got {coeffs.shape[-1]}")
    scaled = coeffs * np.sqrt(basis.eigenvalues)
    return basis.mean + scaled @ basis.modes.T


def sample_prior_coefficients(rng: np.random.Generator, n_modes: int,
                              n_samples: int | None = None) -> np.ndarray:
    """Standard normal coefficient draws, (n_modes,) or (n_samples, n_modes)."""
    if n_samples is None:
        return rng.standard_normal(n_modes)
    return rng.standard_normal((n_samples, n_modes))


def export_spectrum(basis: KLBasis, path) -> int:
    """Write rows m,lambda (m starts at 1); returns the row count."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["m", "lambda"])
        for m, lam in enumerate(basis.eigenvalues, start=1):
            wr.writerow([m, repr(float(lam))])
    return basis.n_modes
