"""P1 finite elements on structured triangulations of the unit square.

Stiffness assembly samples the coefficient tensor at quadrature points;
Dirichlet conditions are imposed by nodal interpolation and row/column
elimination.  Boundary fluxes are evaluated in weak form through the
volume residual, which keeps them usable for rough coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import EllipticityError, MisalignmentError, SolverError
from .meshing import SIDES, TriMesh, interpolation_matrix

try:  # optional algebraic-multigrid preconditioner for very fine meshes
    import pyamg
except ImportError:  # pragma: no cover
    pyamg = None

# quadrature rules on the reference triangle, barycentric coordinates,
# weights sum to one
_QUAD_BARY = {
    1: (np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])),
    2: (np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]),
        np.full(3, 1 / 3)),
    3: (np.array([[1 / 3, 1 / 3, 1 / 3],
                  [0.6, 0.2, 0.2], [0.2, 0.6, 0.2], [0.2, 0.2, 0.6]]),
        np.array([-27 / 48, 25 / 48, 25 / 48, 25 / 48])),
}

DIRECT_SOLVE_LIMIT = 200_000
_RESIDUAL_TOL = 1e-10


@dataclass(frozen=True)
class TensorField:
    """Symmetric 2x2 coefficient field on the unit square.

    Parameters
    ----------
    entries : callable
        Maps an array of points (P, 2) to tensor values (P, 2, 2).
    alpha0 : float
        Known ellipticity floor (informational; assembly checks SPD
        pointwise regardless).
    lipschitz : float, optional
        Lipschitz constant with respect to an external parameter, when
        the field arises from a parametrized family.
    """

    entries: Callable[[np.ndarray], np.ndarray]
    alpha0: float = 0.0
    lipschitz: float | None = None

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        vals = np.asarray(self.entries(pts), dtype=float)
        if vals.shape != (pts.shape[0], 2, 2):
            raise ValueError(f"tensor rule returned shape {vals.shape}, "
                             f"expected {(pts.shape[0], 2, 2)}")
        return vals


def constant_tensor(mat: np.ndarray) -> TensorField:
    m = np.asarray(mat, dtype=float).reshape(2, 2)
    eig = np.linalg.eigvalsh(0.5 * (m + m.T))
    return TensorField(lambda pts: np.broadcast_to(m, (pts.shape[0], 2, 2)),
                       alpha0=float(eig[0]))


def diagonal_tensor(f11: Callable | float, f22: Callable | float,
                    alpha0: float = 0.0) -> TensorField:
    """Diagonal tensor from scalar callables of the point array (P, 2),
    or plain constants."""
    if not callable(f11) and not callable(f22):
        alpha0 = alpha0 or min(float(f11), float(f22))

    def rule(pts):
        out = np.zeros((pts.shape[0], 2, 2))
        out[:, 0, 0] = f11(pts) if callable(f11) else f11
        out[:, 1, 1] = f22(pts) if callable(f22) else f22
        return out

    return TensorField(rule, alpha0=alpha0)


def isotropic_tensor(fn: Callable | float, alpha0: float = 0.0) -> TensorField:
    return diagonal_tensor(fn, fn, alpha0=alpha0)


identity_tensor = constant_tensor(np.eye(2))


def quadrature_points(mesh: TriMesh, quad_order: int = 2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Physical quadrature points for every triangle.

    Returns (points (T, Q, 2), bary (Q, 3), weights (Q,)).
    """
    if quad_order not in _QUAD_BARY:
        raise ValueError(f"quad_order must be one of {sorted(_QUAD_BARY)}")
    bary, wts = _QUAD_BARY[quad_order]
    corners = mesh.geometry()["corners"]          # (T, 3, 2)
    pts = np.einsum("qk,tkd->tqd", bary, corners)
    return pts, bary, wts


def _check_spd(vals: np.ndarray, points: np.ndarray) -> None:
    """vals (P, 2, 2) sampled at points (P, 2); raises on asymmetry or
    a nonpositive eigenvalue."""
    a, b = vals[:, 0, 0], vals[:, 0, 1]
    c, d = vals[:, 1, 0], vals[:, 1, 1]
    scale = np.abs(vals).max() + 1e-300
    skew = np.abs(b - c)
    if skew.max() > 1e-10 * scale:
        i = int(np.argmax(skew))
        raise EllipticityError(
            f"tensor not symmetric at point {points[i]}: off-diagonals "
            f"{b[i]:.6g} vs {c[i]:.6g}")
    half = 0.5 * (a - d)
    eigmin = 0.5 * (a + d) - np.sqrt(half * half + b * b)
    if eigmin.min() <= 0.0:
        i = int(np.argmin(eigmin))
        raise EllipticityError(
            f"tensor not positive definite at point {points[i]}: "
            f"min eigenvalue {eigmin[i]:.6g}")


class StiffnessAssembler:
    """Reusable assembly for a fixed mesh and quadrature order.

    Caches the sparsity pattern so repeated assembly with new coefficient
    values only rewrites the CSR data array.
    """

    def __init__(self, mesh: TriMesh, quad_order: int = 2):
        self.mesh = mesh
        self.quad_order = quad_order
        self.points, self.bary, self.weights = quadrature_points(mesh, quad_order)
        geom = mesh.geometry()
        self.area = geom["area"]
        self.grads = geom["grads"]
        tri = mesh.triangles
        rows = np.repeat(tri, 3, axis=1).ravel()
        cols = np.tile(tri, (1, 3)).ravel()
        key = rows.astype(np.int64) * mesh.n_nodes + cols
        uniq, inverse = np.unique(key, return_inverse=True)
        self._inverse = inverse
        self._nnz = uniq.size
        csr_rows = (uniq // mesh.n_nodes).astype(np.int32)
        csr_cols = (uniq % mesh.n_nodes).astype(np.int32)
        indptr = np.zeros(mesh.n_nodes + 1, dtype=np.int64)
        np.add.at(indptr, csr_rows + 1, 1)
        np.cumsum(indptr, out=indptr)
        self._indptr = indptr
        self._indices = csr_cols

    def tensor_at_quadrature(self, A: TensorField) -> np.ndarray:
        flat = self.points.reshape(-1, 2)
        vals = A(flat)
        _check_spd(vals, flat)
        return vals.reshape(self.points.shape[0], -1, 2, 2)

    def assemble(self, A: TensorField | None = None,
                 tensor_values: np.ndarray | None = None) -> sp.csr_matrix:
        """Stiffness matrix for tensor A, or for precomputed per-quadrature
        values (T, Q, 2, 2)."""
        if tensor_values is None:
            if A is None:
                raise ValueError("either A or tensor_values is required")
            tensor_values = self.tensor_at_quadrature(A)
        # P1 gradients are constant per triangle, only the quadrature
        # average of the tensor enters the element matrix
        abar = np.einsum("q,tqij->tij", self.weights, tensor_values)
        ke = np.einsum("tid,tde,tje,t->tij", self.grads, abar, self.grads,
                       self.area, optimize=True)
        data = np.bincount(self._inverse, weights=ke.ravel(), minlength=self._nnz)
        return sp.csr_matrix((data, self._indices.copy(), self._indptr.copy()),
                             shape=(self.mesh.n_nodes, self.mesh.n_nodes))

    def assemble_load(self, f: Callable | float | None) -> np.ndarray:
        F = np.zeros(self.mesh.n_nodes)
        if f is None:
            return F
        if callable(f):
            fv = np.asarray(f(self.points.reshape(-1, 2)), dtype=float)
        else:
            if float(f) == 0.0:
                return F
            fv = np.full(self.points.shape[0] * self.points.shape[1], float(f))
        fv = fv.reshape(self.points.shape[0], -1)          # (T, Q)
        # F_e[i] = |T| sum_q w_q f(x_q) lambda_i(x_q)
        fe = np.einsum("tq,q,qi,t->ti", fv, self.weights, self.bary, self.area)
        np.add.at(F, self.mesh.triangles.ravel(), fe.ravel())
        return F


def assemble_stiffness(mesh: TriMesh, A: TensorField, quad_order: int = 2) -> sp.csr_matrix:
    """One-off stiffness assembly; see StiffnessAssembler for repeated use."""
    return StiffnessAssembler(mesh, quad_order).assemble(A)


@dataclass(eq=False)
class FemSolution:
    """Nodal P1 solution together with the operator data that produced it."""

    mesh: TriMesh
    values: np.ndarray
    tensor: TensorField
    load: Callable | None
    stiffness: sp.csr_matrix       # full matrix, before elimination
    load_vector: np.ndarray

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        return interpolation_matrix(self.mesh, points) @ self.values

    def gradients(self) -> np.ndarray:
        """Piecewise-constant gradient per triangle, (T, 2)."""
        geom = self.mesh.geometry()
        vals = self.values[self.mesh.triangles]
        return np.einsum("tk,tkd->td", vals, geom["grads"])


class DirichletSolver:
    """Factorized Dirichlet problem for one mesh/tensor pair.

    Solving for several boundary data with the same coefficients reuses
    the interior factorization.
    """

    def __init__(self, mesh: TriMesh, A: TensorField, quad_order: int = 2,
                 assembler: StiffnessAssembler | None = None,
                 tensor_values: np.ndarray | None = None):
        self.mesh = mesh
        self.tensor = A
        self.assembler = assembler or StiffnessAssembler(mesh, quad_order)
        self.K = self.assembler.assemble(A, tensor_values=tensor_values)
        self.interior = mesh.interior_nodes
        self.boundary = mesh.boundary_nodes
        K_csr = self.K.tocsr()
        self._K_ii = K_csr[self.interior][:, self.interior].tocsc()
        self._K_ib = K_csr[self.interior][:, self.boundary].tocsr()
        self._lu = None
        self._amg = None
        if self.interior.size <= DIRECT_SOLVE_LIMIT:
            self._lu = spla.splu(self._K_ii)
        elif pyamg is not None:
            self._amg = pyamg.smoothed_aggregation_solver(self._K_ii.tocsr())

    def _solve_interior(self, rhs: np.ndarray) -> np.ndarray:
        if self._lu is not None:
            u = self._lu.solve(rhs)
        else:
            M = self._amg.aspreconditioner() if self._amg is not None else None
            u, info = spla.cg(self._K_ii, rhs, rtol=_RESIDUAL_TOL,
                              maxiter=20000, M=M)
            if info != 0:
                res = np.linalg.norm(self._K_ii @ u - rhs)
                raise SolverError("conjugate gradients did not converge",
                                  iterations=abs(info), residual=res)
        denom = np.linalg.norm(rhs)
        res = np.linalg.norm(self._K_ii @ u - rhs)
        if res > _RESIDUAL_TOL * max(denom, 1.0):
            raise SolverError("interior solve residual too large",
                              iterations=0, residual=res / max(denom, 1.0))
        return u

    def solve(self, f: Callable | None = None, g: Callable | float = 0.0) -> FemSolution:
        F = self.assembler.assemble_load(f)
        u = np.zeros(self.mesh.n_nodes)
        if callable(g):
            gb = np.asarray(g(self.mesh.nodes[self.boundary]), dtype=float)
        else:
            gb = np.full(self.boundary.size, float(g))
        u[self.boundary] = gb
        rhs = F[self.interior] - self._K_ib @ gb
        u[self.interior] = self._solve_interior(rhs)
        return FemSolution(mesh=self.mesh, values=u, tensor=self.tensor,
                           load=f, stiffness=self.K, load_vector=F)


def solve_dirichlet(mesh: TriMesh, A: TensorField, f: Callable | None = None,
                    g: Callable | float = 0.0, quad_order: int = 2) -> FemSolution:
    """Solve -div(A grad p) = f with Dirichlet data g interpolated at
    boundary nodes."""
    return DirichletSolver(mesh, A, quad_order=quad_order).solve(f=f, g=g)


@dataclass(frozen=True)
class FluxProbe:
    """Boundary segment with a weight profile in the side parameter.

    The default profile is the unit hat peaking at the segment midpoint.
    """

    side: str
    lo: float
    hi: float
    weight: Callable | None = None

    def __post_init__(self):
        if self.side not in SIDES:
            raise ValueError(f"unknown side {self.side!r}")
        if not self.lo < self.hi:
            raise ValueError("segment needs lo < hi")

    def profile(self, t: np.ndarray) -> np.ndarray:
        if self.weight is not None:
            return np.asarray(self.weight(t), dtype=float)
        mid = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo)
        return np.maximum(0.0, 1.0 - np.abs(np.asarray(t) - mid) / half)


def segment_alignment(probe: FluxProbe, mesh: TriMesh) -> bool:
    """True when the segment endpoints and midpoint are mesh nodes."""
    h = mesh.h
    mid = 0.5 * (probe.lo + probe.hi)
    return all(abs(v / h - round(v / h)) < 1e-9 for v in (probe.lo, probe.hi, mid))


def probe_weights(probe: FluxProbe, mesh: TriMesh) -> np.ndarray:
    """Nodal weight vector of the probe's boundary profile (zero off-side)."""
    w = np.zeros(mesh.n_nodes)
    idx, params = mesh.side_nodes(probe.side)
    inside = (params >= probe.lo - 1e-12) & (params <= probe.hi + 1e-12)
    w[idx[inside]] = probe.profile(params[inside])
    return w


def flux_observation(sol: FemSolution, probes: list[FluxProbe],
                     require_aligned: bool = False) -> np.ndarray:
    """Weak-form boundary fluxes of a solved Dirichlet problem.

    Each probe value is  int_Omega A grad p . grad Phi - int_Omega f Phi,
    with Phi the P1 extension of the probe profile by zero at interior
    nodes.  On a mesh whose nodes contain the segment endpoints and
    midpoint this reproduces the continuous functional for affine p.

    Parameters
    ----------
    require_aligned : bool
        Reject probes whose breakpoints are not mesh nodes instead of
        interpolating the profile.
    """
    mesh = sol.mesh
    Kp = sol.stiffness @ sol.values
    out = np.empty(len(probes))
    for i, probe in enumerate(probes):
        if require_aligned and not segment_alignment(probe, mesh):
            raise MisalignmentError(
                f"probe [{probe.lo}, {probe.hi}] on side {probe.side!r} has "
                f"breakpoints off the mesh (h = 1/{mesh.n})")
        w = probe_weights(probe, mesh)
        out[i] = w @ Kp - w @ sol.load_vector
    return out


def _values_at_quadrature(sol: FemSolution, bary: np.ndarray) -> np.ndarray:
    nodal = sol.values[sol.mesh.triangles]            # (T, 3)
    return nodal @ bary.T                             # (T, Q)


def l2_error(sol: FemSolution, reference, quad_order: int = 2) -> float:
    """L2 distance between a solution and a reference.

    The reference is either a callable on point arrays or another
    FemSolution (interpolated at this mesh's quadrature points).
    """
    pts, bary, wts = quadrature_points(sol.mesh, quad_order)
    own = _values_at_quadrature(sol, bary)
    flat = pts.reshape(-1, 2)
    if isinstance(reference, FemSolution):
        ref = reference.evaluate(flat)
    else:
        ref = np.asarray(reference(flat), dtype=float)
    diff = own - ref.reshape(own.shape)
    area = sol.mesh.geometry()["area"]
    val = np.einsum("tq,q,t->", diff * diff, wts, area)
    return float(np.sqrt(max(val, 0.0)))


def l2_norm_field(mesh: TriMesh, values: np.ndarray, quad_order: int = 2) -> float:
    """L2 norm of a nodal P1 field."""
    pts, bary, wts = quadrature_points(mesh, quad_order)
    vals = values[mesh.triangles] @ bary.T
    area = mesh.geometry()["area"]
    return float(np.sqrt(max(np.einsum("tq,q,t->", vals * vals, wts, area), 0.0)))
